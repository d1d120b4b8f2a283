"""Greedy inference and translation metrics (corpus BLEU, WER)."""

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import layers as L
from .errors import EmptyCorpus, EmptyReference, LengthMismatch, LineCountMismatch
from .seqprep import BOS, EOS, PAD, SEQ_LEN, Batch, dedup, decode_tokens, encode_pairs, make_batches
from .transformer import _pe, compact_positions, encode


# -- decoding -------------------------------------------------------------

def _heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def greedy_decode_batch(params, cfg, batch, max_len=SEQ_LEN):
    """Greedy decoding for every source in ``batch``.

    Emits the argmax token (lowest id on ties) one step at a time from BOS
    until EOS or ``max_len`` tokens. Decoder keys/values are cached per
    step, which is exact because decoder self-attention is causal.
    """
    max_len = min(max_len, cfg.max_len)
    if cfg.frontend == "discrete":
        src = batch.encoder_tokens
        width = max(1, int(np.flatnonzero((src != PAD).any(axis=0)).max(initial=-1)) + 1)
        batch = Batch(src[:, :width], batch.decoder_input, batch.decoder_target, batch.ids)
        memory, src_valid = encode(params, cfg, batch, "eval")
    else:
        memory, src_valid = encode(params, cfg, batch, "eval", positions=compact_positions(batch, cfg))
    b = memory.shape[0]
    h, d = cfg.heads, cfg.d_model
    dk = d // h
    dtype = params["tgt_embed"].dtype
    scale = dtype.type(math.sqrt(d))
    att_scale = dtype.type(1.0 / math.sqrt(dk))
    pe = _pe(max_len, d, dtype)
    cross = []
    for i in range(cfg.dec_layers):
        p = f"dec.{i}.cross"
        cross.append((_heads(memory @ params[f"{p}.wk"], h), _heads(memory @ params[f"{p}.wv"], h)))
    cross_allowed = src_valid[:, None, :]
    kcache = [np.zeros((b, h, max_len, dk), dtype=dtype) for _ in range(cfg.dec_layers)]
    vcache = [np.zeros((b, h, max_len, dk), dtype=dtype) for _ in range(cfg.dec_layers)]
    key_valid = np.zeros((b, max_len), dtype=bool)
    tokens = np.full((b, max_len + 1), PAD, dtype=np.int64)
    tokens[:, 0] = BOS
    done = np.zeros(b, dtype=bool)
    for t in range(max_len):
        cur = tokens[:, t]
        key_valid[:, t] = cur != PAD
        y = (params["tgt_embed"][cur] * scale + pe[t])[:, None, :]
        for i in range(cfg.dec_layers):
            p = f"dec.{i}"
            q = _heads(y @ params[f"{p}.self.wq"], h)
            kcache[i][:, :, t:t + 1] = _heads(y @ params[f"{p}.self.wk"], h)
            vcache[i][:, :, t:t + 1] = _heads(y @ params[f"{p}.self.wv"], h)
            k, v = kcache[i][:, :, :t + 1], vcache[i][:, :, :t + 1]
            pr = kernels.masked_softmax((q @ k.swapaxes(-1, -2)) * att_scale, key_valid[:, None, :t + 1])
            a = (pr @ v).transpose(0, 2, 1, 3).reshape(b, 1, d) @ params[f"{p}.self.wo"]
            y1 = L.layer_norm_fwd(y + a, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])[0]
            q = _heads(y1 @ params[f"{p}.cross.wq"], h)
            ck, cv = cross[i]
            pr = kernels.masked_softmax((q @ ck.swapaxes(-1, -2)) * att_scale, cross_allowed)
            c = (pr @ cv).transpose(0, 2, 1, 3).reshape(b, 1, d) @ params[f"{p}.cross.wo"]
            y2 = L.layer_norm_fwd(y1 + c, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])[0]
            f = L.ffn_fwd(y2, params, f"{p}.ffn")[0]
            y = L.layer_norm_fwd(y2 + f, params[f"{p}.ln3.g"], params[f"{p}.ln3.b"])[0]
        logits = y[:, 0] @ params["out.w"] + params["out.b"]
        nxt = logits.argmax(axis=-1)
        tokens[:, t + 1] = np.where(done, PAD, nxt)
        done |= nxt == EOS
        if done.all():
            break
    return [decode_tokens(row[1:]) for row in tokens]


def greedy_decode(params, cfg, source, max_len=SEQ_LEN):
    """Greedy decode a single source (token sequence, or a one-row Batch)."""
    if isinstance(source, Batch):
        return greedy_decode_batch(params, cfg, source, max_len)[0]
    src = np.asarray(source, dtype=np.int64).reshape(1, -1)
    dummy = np.zeros((1, 1), dtype=np.int64)
    return greedy_decode_batch(params, cfg, Batch(src, dummy, dummy), max_len)[0]


# -- metrics --------------------------------------------------------------

@dataclass
class BleuResult:
    bleu: float
    precisions: list
    bp: float
    hyp_len: int
    ref_len: int
    matches: list = field(default_factory=list)
    totals: list = field(default_factory=list)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n=4):
    """Corpus BLEU (0-100) with one reference per hypothesis.

    Clipped n-gram matches and totals are summed over the corpus before
    taking precisions. An order with no matches gets precision
    ``1 / (2**q * max(1, total))``, q counting such orders from 1.
    """
    hyps = [list(h) for h in hypotheses]
    refs = [list(r) for r in references]
    if not hyps:
        raise EmptyCorpus("no hypotheses to score")
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h_counts = _ngrams(hyp, n)
            r_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(cnt, r_counts[g]) for g, cnt in h_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = []
    q = 0
    for m, t in zip(matches, totals):
        if m == 0:
            q += 1
            precisions.append(1.0 / (2 ** q * max(1, t)))
        else:
            precisions.append(m / t)
    if c == 0:
        bp = 0.0
    elif c > r:
        bp = 1.0
    else:
        bp = math.exp(1.0 - r / c)
    bleu = 0.0 if bp == 0 else 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(bleu, precisions, bp, c, r, matches, totals)


_PUNCT = re.compile(r"""([.,!?;:()"'])""")


def tokenize_text(text):
    """Whitespace tokens with . , ! ? ; : ( ) " ' split off; case is kept."""
    return _PUNCT.sub(r" \1 ", text).split()


def _as_ids(hyp, ref):
    vocab = {}
    def ids(seq):
        return np.array([vocab.setdefault(tok, len(vocab)) for tok in seq], dtype=np.int64)
    return ids(hyp), ids(ref)


def edit_distance(hyp, ref):
    a, b = _as_ids(list(hyp), list(ref))
    return kernels.edit_distance(a, b)


def wer(hypothesis, reference):
    """Word error rate in percent; insertions can push it above 100."""
    reference = list(reference)
    if not reference:
        raise EmptyReference("reference is empty")
    return 100.0 * edit_distance(hypothesis, reference) / len(reference)


def corpus_wer(hypotheses, references):
    hyps, refs = list(hypotheses), list(references)
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    edits = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    total = sum(len(r) for r in refs)
    if total == 0:
        raise EmptyReference("all references are empty")
    return 100.0 * edits / total


@dataclass
class EvalReport:
    bleu: float
    precisions: list
    bp: float
    hyp_len: int
    ref_len: int
    wer: float
    samples: int
    exact_match: float = float("nan")

    CSV_COLUMNS = ("bleu", "p1", "p2", "p3", "p4", "bp", "hyp_len", "ref_len", "wer", "samples", "exact_match")

    def csv_row(self):
        p = list(self.precisions) + [float("nan")] * (4 - len(self.precisions))
        vals = [f"{self.bleu:.4f}"] + [f"{x:.6f}" for x in p[:4]] + [
            f"{self.bp:.6f}", str(self.hyp_len), str(self.ref_len), f"{self.wer:.2f}", str(self.samples),
            f"{self.exact_match:.4f}"]
        return ",".join(vals)

    def to_text(self):
        p = " ".join(f"p{i + 1}={x * 100:.2f}" for i, x in enumerate(self.precisions))
        lines = [f"BLEU = {self.bleu:.4f}  ({p}  BP={self.bp:.4f}  hyp_len={self.hyp_len}  ref_len={self.ref_len})",
                 f"WER  = {self.wer:.2f}%", f"samples = {self.samples}"]
        if not math.isnan(self.exact_match):
            lines.append(f"exact match = {100 * self.exact_match:.2f}%")
        return "\n".join(lines)


def score(hypotheses, references):
    hyps = [list(h) for h in hypotheses]
    refs = [list(r) for r in references]
    b = corpus_bleu(hyps, refs)
    exact = float(np.mean([h == r for h, r in zip(hyps, refs)]))
    return EvalReport(b.bleu, b.precisions, b.bp, b.hyp_len, b.ref_len, corpus_wer(hyps, refs), len(hyps), exact)


def translate_manifest(params, cfg, manifest, batch_size=50, use_dedup=False, max_len=SEQ_LEN):
    """Greedy hypotheses for every record, in manifest order."""
    if len(manifest) == 0:
        return []
    encoded = encode_pairs(manifest, cfg.max_len, use_dedup) if cfg.frontend == "discrete" else None
    if encoded is None:
        n = len(manifest)
        z = np.zeros((n, cfg.max_len), dtype=np.int64)
        encoded = (z, z, z)
    out = []
    for b in make_batches(manifest, batch_size, shuffle=False, seq_len=cfg.max_len,
                          with_features=cfg.frontend == "continuous", encoded=encoded):
        out.extend(greedy_decode_batch(params, cfg, b, max_len))
    return out


def evaluate_units(params, cfg, manifest, batch_size=50, use_dedup=False, hypotheses=None):
    """Unit-level BLEU/WER of greedy translations against reference target units."""
    if hypotheses is None:
        hypotheses = translate_manifest(params, cfg, manifest, batch_size, use_dedup)
    refs = []
    for rec in manifest.records:
        u = manifest.units(rec, "target")
        refs.append(dedup(u) if use_dedup else u)
    return score([list(map(int, h)) for h in hypotheses], [list(map(int, r)) for r in refs])


def read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n").rstrip("\r") for line in f]


def evaluate_transcripts(hyp_file, ref_file):
    hyps, refs = read_lines(hyp_file), read_lines(ref_file)
    if len(hyps) != len(refs):
        raise LineCountMismatch(f"{hyp_file} has {len(hyps)} lines, {ref_file} has {len(refs)}")
    return score([tokenize_text(h) for h in hyps], [tokenize_text(r) for r in refs])
