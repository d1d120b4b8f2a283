"""``u2u`` command line: synth-data, extract-units, train, translate, evaluate, stats, ablate.

Exit codes: 0 on success, 1 on a runtime error, 2 on a usage error.
"""

import argparse
import csv
import os
import sys
from contextlib import nullcontext
from importlib import resources

import numpy as np

from . import pipeline, synth
from .audio_io import write_wav
from .config import load_config
from .errors import ConfigError, U2UError
from .evaluate import EvalReport, evaluate_transcripts, score, translate_manifest
from .quantizer import load_codebook
from .seqprep import load_manifest, read_units, vocab_size, write_units
from .trainer import load_checkpoint, read_grid, run_ablation, train


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _fractions(text):
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fractions {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("need three comma-separated fractions")
    return parts


def _spec_from_file(path):
    if path is None:
        return synth.ToySpec()
    kw = {}
    types = {"alphabet_size": int, "min_symbols": int, "max_symbols": int, "symbol_duration": float,
             "fade": float, "amplitude": float, "noise": float}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ConfigError(f"unknown toy spec key {key!r}")
            kw[key] = types[key](raw)
    m = kw.pop("alphabet_size", 8)
    return synth.ToySpec(**kw) if m == 8 else synth.ToySpec.with_alphabet(m, **kw)


# -- commands -------------------------------------------------------------

def cmd_synth_data(args):
    if args.pairs < 1:
        raise ValueError("pairs must be ≥ 1")
    spec = _spec_from_file(args.spec)
    corpus = synth.generate(spec, args.pairs, args.seed, args.out)
    parts = synth.write_splits(corpus.manifest, args.out, args.fractions, args.seed)
    print(f"wrote {args.pairs} pairs to {args.out} "
          f"(train {len(parts[0])}, dev {len(parts[1])}, test {len(parts[2])})")


def cmd_extract_units(args):
    cfg = load_config(args.config)
    k = args.k or cfg.k
    for path in args.manifest:
        m, cb = pipeline.extract_units(path, args.side, args.codebook, k=k, seed=cfg.seed,
                                       feature_cfg=cfg.feature_config(), max_frames=cfg.get("max_frames"),
                                       save_features=args.features, log=_log)
        print(f"{path}: {len(m)} {args.side} unit files (k={cb.k})")


def _codebook_k(path, default):
    return load_codebook(path).k if path and os.path.exists(path) else default


def cmd_train(args):
    cfg = load_config(args.config)
    frontend = cfg.frontend_name(args.frontend)
    k_src = _codebook_k(args.source_codebook or cfg.path("source_codebook"), cfg.k)
    k_tgt = _codebook_k(args.target_codebook or cfg.path("target_codebook"), cfg.k)
    mcfg = cfg.model_config(frontend, k_src, k_tgt)
    tcfg = cfg.train_config()
    if args.epochs is not None:
        tcfg = type(tcfg)(**{**tcfg.__dict__, "epochs": args.epochs})
    train_path = args.train or cfg.path("train_manifest")
    dev_path = args.dev or cfg.path("dev_manifest")
    if not train_path or not dev_path:
        raise ConfigError("train and dev manifests are required (--train/--dev or config)")
    out_dir = args.out or cfg.path("out_dir", "run")
    train_m = load_manifest(train_path, "train", check_files=False)
    dev_m = load_manifest(dev_path, "dev", check_files=False)
    rep = train(mcfg, tcfg, train_m, dev_m, out_dir, resume=args.resume, log=_log)
    print(f"trained {len(rep.rows)} epochs ({rep.steps} steps); metrics in {os.path.join(out_dir, 'metrics.csv')}")
    print(f"last checkpoint: {rep.last_checkpoint}")
    if rep.best_checkpoint:
        print(f"best checkpoint: {rep.best_checkpoint}")


def cmd_translate(args):
    ck = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, check_files=False)
    hyps = translate_manifest(ck.params, ck.model_cfg, manifest, args.batch_size, ck.train_cfg.dedup)
    os.makedirs(args.out_dir, exist_ok=True)
    cb = None
    if args.out == "wav":
        if not args.codebook:
            raise ConfigError("--out wav needs --codebook (the target-side codebook)")
        cb = load_codebook(args.codebook)
    for rec, units in zip(manifest.records, hyps):
        write_units(units, os.path.join(args.out_dir, f"{rec.id}.u2uu"))
        if cb is not None:
            units = [u for u in units if u < cb.k]
            write_wav(pipeline.units_to_audio(units, cb, seed=ck.train_cfg.seed),
                      os.path.join(args.out_dir, f"{rec.id}.wav"))
    print(f"wrote {len(hyps)} predictions to {args.out_dir}")


def _unit_sequences(path, ids=None):
    """Unit sequences keyed by id from a directory of unit files or a manifest's target side."""
    if os.path.isdir(path):
        names = sorted(n[:-5] for n in os.listdir(path) if n.endswith(".u2uu"))
        return {n: read_units(os.path.join(path, f"{n}.u2uu")) for n in names}
    m = load_manifest(path, check_files=False)
    return {r.id: m.units(r, "target") for r in m.records}


def cmd_evaluate(args):
    if args.mode == "transcripts":
        report = evaluate_transcripts(args.hyp, args.ref)
    else:
        hyp = _unit_sequences(args.hyp)
        ref = _unit_sequences(args.ref)
        missing = sorted(set(ref) - set(hyp))
        if missing:
            raise ValueError(f"{len(missing)} references have no hypothesis, e.g. {missing[0]!r}")
        ids = sorted(ref)
        report = score([list(map(int, hyp[i])) for i in ids], [list(map(int, ref[i])) for i in ids])
    print(report.to_text())
    if args.report:
        with open(args.report, "w", newline="") as f:
            f.write(",".join(EvalReport.CSV_COLUMNS) + "\n" + report.csv_row() + "\n")


def unit_histogram(lengths, width=10):
    if len(lengths) == 0:
        return []
    bins = np.asarray(lengths) // width
    counts = np.bincount(bins - bins.min())
    return [(int((bins.min() + i) * width), int(c)) for i, c in enumerate(counts)]


def cmd_stats(args):
    m = load_manifest(args.manifest, check_files=False)
    lengths = [len(m.units(r, args.side)) for r in m.records]
    rows = unit_histogram(lengths, args.bin_width)
    out = open(args.out, "w", newline="") if args.out else nullcontext(sys.stdout)
    with out as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("bin_start", "count"))
        w.writerows(rows)


def default_grid_path():
    return str(resources.files("u2u") / "data" / "ablation_grid.csv")


def cmd_ablate(args):
    cfg = load_config(args.config)
    grid = read_grid(args.grid or default_grid_path())
    paths = [args.train or cfg.path("train_manifest"), args.dev or cfg.path("dev_manifest"),
             args.test or cfg.path("test_manifest")]
    if not all(paths):
        raise ConfigError("train, dev and test manifests are required")
    data = tuple(load_manifest(p, s, check_files=False) for p, s in zip(paths, ("train", "dev", "test")))
    k = max(_codebook_k(cfg.path("source_codebook"), cfg.k), _codebook_k(cfg.path("target_codebook"), cfg.k))
    mcfg = cfg.model_config("discrete", k, k)
    rows = run_ablation(grid, data, mcfg, cfg.train_config(), args.out, epoch_cap=args.epoch_cap, log=_log)
    failed = sum(1 for r in rows if isinstance(r["bleu"], float) and np.isnan(r["bleu"]))
    print(f"{len(rows)} configurations, {failed} failed; results in {args.out}")


# -- parser ---------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="u2u", description="Unit-to-unit speech translation toolkit")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS threads; 1 (default) is the bitwise-reproducible reference mode")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the toy parallel corpus")
    s.add_argument("--spec", help="key = value file overriding toy spec fields")
    s.add_argument("--pairs", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--fractions", type=_fractions, default=(0.8, 0.1, 0.1))
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("extract-units", help="featurize, quantize and cache unit files")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True, nargs="+")
    s.add_argument("--side", required=True, choices=("source", "target"))
    s.add_argument("--codebook", required=True, help="read if it exists, otherwise trained and written")
    s.add_argument("--k", type=int)
    s.add_argument("--features", action="store_true", help="also cache log-mel features for the continuous frontend")
    s.set_defaults(func=cmd_extract_units)

    s = sub.add_parser("train", help="train a translation model")
    s.add_argument("--config")
    s.add_argument("--frontend", choices=("discrete", "continuous"))
    s.add_argument("--train")
    s.add_argument("--dev")
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume")
    s.add_argument("--source-codebook")
    s.add_argument("--target-codebook")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="greedy-decode a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", choices=("units", "wav"), default="units")
    s.add_argument("--out-dir", default="predictions")
    s.add_argument("--codebook", help="target codebook, needed for --out wav")
    s.add_argument("--batch-size", type=int, default=50)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="BLEU and WER")
    s.add_argument("--mode", choices=("units", "transcripts"), required=True)
    s.add_argument("--hyp", required=True, help="unit directory/manifest, or transcript file")
    s.add_argument("--ref", required=True, help="unit directory/manifest, or transcript file")
    s.add_argument("--report", help="write the report as CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stats", help="histogram of units per sample")
    s.add_argument("--manifest", required=True)
    s.add_argument("--side", choices=("source", "target"), default="source")
    s.add_argument("--bin-width", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("ablate", help="run the ablation grid")
    s.add_argument("--grid", help="grid CSV (default: the shipped 7-row grid)")
    s.add_argument("--config")
    s.add_argument("--train")
    s.add_argument("--dev")
    s.add_argument("--test")
    s.add_argument("--epoch-cap", type=int)
    s.add_argument("--out", default="ablation.csv")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (U2UError, OSError, ValueError) as exc:
        print(f"u2u {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
