"""Adam training loop, per-epoch dev loss, checkpoints and the ablation grid.

Randomness is derived from the single training seed: epoch ``e`` shuffles
with ``seed ^ e`` and optimizer step ``t`` draws dropout masks from
``default_rng([seed, t])``. Resuming from a checkpoint therefore
continues a run exactly as if it had never stopped.
"""

import csv
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, CorruptCheckpoint, Interrupted, VersionUnsupported
from .evaluate import evaluate_units
from .seqprep import encode_pairs, make_batches
from .transformer import ModelConfig, forward, init_params, loss, loss_and_grads

CKPT_MAGIC = b"U2UK"
CKPT_VERSION = 1
METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "seconds")
ABLATION_COLUMNS = ("expt_no", "sequence_length", "heads", "enc_dec_layers", "feedforward_dim", "learning_rate",
                    "epochs", "val_loss", "bleu", "wer")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 80
    batch_size: int = 25
    seed: int = 0
    val_every: int = 1
    dedup: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must be in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.val_every < 1:
            raise ConfigError("batch_size and val_every must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(w) for k, w in params.items()},
                   {k: np.zeros_like(w) for k, w in params.items()}, 0)


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, w in params.items():
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(w))
        v = state.v.setdefault(k, np.zeros_like(w))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(w.dtype)
    return params, state


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict
    opt: AdamState
    epoch: int = 0
    best_val: float = math.inf
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _record(name, arr):
    a = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    return struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) \
        + a.tobytes()


def checkpoint_bytes(ckpt):
    meta = {
        "model": ckpt.model_cfg.to_dict(),
        "train": ckpt.train_cfg.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.opt.t,
        "best_val": None if math.isinf(ckpt.best_val) else ckpt.best_val,
        "history": ckpt.history,
        "rng": {"seed": ckpt.train_cfg.seed, "next_epoch": ckpt.epoch + 1, "next_step": ckpt.opt.t},
        **ckpt.meta,
    }
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    recs = [_record(k, w) for k, w in ckpt.params.items()]
    recs += [_record(f"adam.m/{k}", w) for k, w in ckpt.opt.m.items()]
    recs += [_record(f"adam.v/{k}", w) for k, w in ckpt.opt.v.items()]
    body = struct.pack("<I", len(mb)) + mb + struct.pack("<I", len(recs)) + b"".join(recs)
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, kernels.crc64(body)) + body


def save_checkpoint(ckpt, path):
    """Atomic write: temp file then rename."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    version, crc = struct.unpack_from("<IQ", blob, 4)
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"{path}: checkpoint version {version}")
    body = blob[16:]
    if kernels.crc64(body) != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or damaged)")
    try:
        (mlen,) = struct.unpack_from("<I", body, 0)
        meta = json.loads(body[4:4 + mlen].decode("utf-8"))
        pos = 4 + mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            tensors[name] = np.frombuffer(body[pos:pos + size], dtype="<f4").reshape(shape).astype(dtype)
            pos += size
    except (struct.error, ValueError, KeyError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed body ({exc})") from exc
    params = {k: w for k, w in tensors.items() if not k.startswith("adam.")}
    opt = AdamState({k[7:]: w for k, w in tensors.items() if k.startswith("adam.m/")},
                    {k[7:]: w for k, w in tensors.items() if k.startswith("adam.v/")}, meta["step"])
    best = meta.get("best_val")
    extra = {k: v for k, v in meta.items()
             if k not in ("model", "train", "epoch", "step", "best_val", "history", "rng")}
    return Checkpoint(ModelConfig.from_dict(meta["model"]), TrainConfig(**meta["train"]), params, opt,
                      meta["epoch"], math.inf if best is None else best, meta.get("history", []), extra)


# -- training -------------------------------------------------------------

@dataclass
class TrainReport:
    rows: list
    params: dict
    steps: int
    batch_losses: list = field(default_factory=list)
    last_checkpoint: str = None
    best_checkpoint: str = None

    @property
    def val_losses(self):
        return [r["val_loss"] for r in self.rows]


def dev_loss(params, cfg, manifest, batch_size=25, use_dedup=False):
    """Token-weighted mean cross-entropy in eval mode."""
    if len(manifest) == 0:
        return float("nan")
    total = 0.0
    count = 0
    for b in make_batches(manifest, batch_size, shuffle=False, seq_len=cfg.max_len, use_dedup=use_dedup,
                          with_features=cfg.frontend == "continuous"):
        logits, c = forward(params, cfg, b, "eval", keep_cache=False, compact=True)
        n = int((b.decoder_target != 0).sum())
        total += loss(logits, b.trimmed().decoder_target) * n
        count += n
    return total / count


def write_metrics(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), f"{r['seconds']:.3f}"])


def train(model_cfg, train_cfg, train_manifest, dev_manifest, out_dir=None, resume=None, params=None,
          log=None, stop_after=None):
    """Train for ``train_cfg.epochs`` epochs (continuing from ``resume`` if given).

    With ``out_dir`` set, writes ``metrics.csv``, ``last.ckpt`` after every
    epoch and ``best.ckpt`` whenever the dev loss improves.
    ``stop_after`` ends the run early after that epoch (used to simulate
    an interruption).
    """
    seed = train_cfg.seed
    history = []
    best = math.inf
    start = 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ck.model_cfg != model_cfg:
            raise ConfigError("checkpoint model configuration differs from the requested one")
        params, opt, start, best, history = ck.params, ck.opt, ck.epoch, ck.best_val, list(ck.history)
    else:
        params = init_params(model_cfg, seed) if params is None else params
        opt = AdamState.zeros_like(params)
    continuous = model_cfg.frontend == "continuous"
    encoded = encode_pairs(train_manifest, model_cfg.max_len, train_cfg.dedup)
    report = TrainReport(history, params, opt.t)
    paths = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"last": os.path.join(out_dir, "last.ckpt"), "best": os.path.join(out_dir, "best.ckpt"),
                 "metrics": os.path.join(out_dir, "metrics.csv")}

    def checkpoint(epoch, extra=None):
        return Checkpoint(model_cfg, train_cfg, params, opt, epoch, best, history, extra or {})

    epoch = start
    try:
        for epoch in range(start + 1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            losses = []
            for b in make_batches(train_manifest, train_cfg.batch_size, seed=seed ^ epoch, shuffle=True,
                                  seq_len=model_cfg.max_len, with_features=continuous, encoded=encoded):
                value, grads = loss_and_grads(params, model_cfg, b, "train", seed=[seed, opt.t])
                adam_step(params, grads, opt, train_cfg)
                losses.append(value)
            report.batch_losses.extend(losses)
            train_loss = float(np.mean(losses))
            if epoch % train_cfg.val_every == 0 or epoch == train_cfg.epochs:
                val = dev_loss(params, model_cfg, dev_manifest, train_cfg.batch_size, train_cfg.dedup)
            else:
                val = float("nan")
            row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val,
                   "seconds": time.perf_counter() - t0}
            history.append(row)
            improved = not math.isnan(val) and val < best
            if improved:
                best = val
            if log is not None:
                log(f"epoch {epoch:3d}  train {train_loss:.4f}  dev {val:.4f}  ({row['seconds']:.1f}s)")
            if paths:
                write_metrics(history, paths["metrics"])
                save_checkpoint(checkpoint(epoch), paths["last"])
                if improved:
                    save_checkpoint(checkpoint(epoch), paths["best"])
            if stop_after is not None and epoch >= stop_after:
                break
    except KeyboardInterrupt:
        if paths:
            # the partial epoch is discarded on resume; the saved epoch counter is the last completed one
            save_checkpoint(checkpoint(epoch - 1 if history and history[-1]["epoch"] != epoch else epoch,
                                       {"interrupted": True}), paths["last"])
        raise Interrupted(f"training interrupted during epoch {epoch}") from None
    report.steps = opt.t
    report.params = params
    report.last_checkpoint = paths.get("last")
    report.best_checkpoint = paths.get("best") if paths and os.path.exists(paths["best"]) else None
    report.rows = history
    report.opt = opt
    return report


# -- ablation -------------------------------------------------------------

_GRID_FIELDS = {"sequence_length": int, "heads": int, "enc_dec_layers": int, "feedforward_dim": int,
                "learning_rate": float, "epochs": int}


def read_grid(path):
    """Parse a grid CSV. Returns a list of dicts; unparseable rows carry an ``error`` key."""
    rows = []
    with open(path, newline="") as f:
        for i, raw in enumerate(csv.DictReader(f), 1):
            row = {"expt_no": raw.get("expt_no") or str(i)}
            try:
                for key, conv in _GRID_FIELDS.items():
                    value = raw.get(key)
                    if value is None or value.strip() == "":
                        raise ValueError(f"missing {key}")
                    row[key] = conv(value)
                row["expt_no"] = int(row["expt_no"])
            except ValueError as exc:
                row["error"] = f"row {i}: {exc}"
            rows.append(row)
    return rows


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def run_ablation(grid, data, base_model, base_train, out_csv, epoch_cap=None, log=None):
    """Train and score each grid configuration; failures leave a row with empty metrics.

    ``data`` is ``(train, dev, test)`` manifests. Returns the list of result rows.
    """
    train_m, dev_m, test_m = data
    results = []
    errors = []
    for i, row in enumerate(grid, 1):
        out = {k: row.get(k, "") for k in ABLATION_COLUMNS}
        out["expt_no"] = row.get("expt_no", i)
        out.update(val_loss=float("nan"), bleu=float("nan"), wer=float("nan"))
        try:
            if "error" in row:
                raise ConfigError(row["error"])
            epochs = row["epochs"] if epoch_cap is None else min(row["epochs"], epoch_cap)
            mcfg = ModelConfig(**{**base_model.__dict__, "heads": row["heads"], "enc_layers": row["enc_dec_layers"],
                                  "dec_layers": row["enc_dec_layers"], "ffn_dim": row["feedforward_dim"],
                                  "max_len": row["sequence_length"]})
            tcfg = TrainConfig(**{**base_train.__dict__, "lr": row["learning_rate"], "epochs": epochs})
            rep = train(mcfg, tcfg, train_m, dev_m, log=log)
            ev = evaluate_units(rep.params, mcfg, test_m, use_dedup=tcfg.dedup)
            out.update(val_loss=rep.rows[-1]["val_loss"], bleu=ev.bleu, wer=ev.wer)
        except Exception as exc:  # noqa: BLE001 - one bad row must not stop the grid
            errors.append(f"expt {out['expt_no']}: {exc}")
            if log is not None:
                log(f"expt {out['expt_no']} failed: {exc}")
        results.append(out)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(ABLATION_COLUMNS)
            for r in results:
                w.writerow([_fmt(r[k]) for k in ABLATION_COLUMNS])
        if errors:
            with open(f"{out_csv}.errors.txt", "w") as f:
                f.write("\n".join(errors) + "\n")
    return results
