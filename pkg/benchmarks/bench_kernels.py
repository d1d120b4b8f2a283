"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time per kernel and backend, the speedup, and
the largest absolute difference between the two outputs.
"""

import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from u2u import kernels


def cases(rng):
    x = rng.normal(size=(20000, 13))
    c = rng.normal(size=(100, 13))
    a = rng.integers(0, 50, 400)
    b = rng.integers(0, 50, 450)
    scores = rng.normal(size=(8, 4, 300, 300))
    allowed = np.broadcast_to(np.tril(np.ones((300, 300), dtype=bool)), (8, 300, 300)).copy()
    probs = kernels.python_backend.masked_softmax(scores, allowed)
    dprobs = rng.normal(size=scores.shape)
    blob = rng.integers(0, 256, 4_000_000, dtype=np.uint8)
    return [
        ("nearest_centroid 20000x100x13", "nearest_centroid", (x, c)),
        ("edit_distance 400x450", "edit_distance", (a, b)),
        ("masked_softmax 8x4x300x300", "masked_softmax", (scores, allowed)),
        ("softmax_backward 8x4x300x300", "softmax_backward", (probs, dprobs)),
        ("crc64 4 MB", "crc64", (blob, 0)),
    ]


def best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if kernels.compiled_backend is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':32s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s} {'max |diff|':>11s}")
    with threadpool_limits(limits=1):
        for label, name, fargs in cases(np.random.default_rng(args.seed)):
            tp, op = best_time(getattr(kernels.python_backend, name), fargs, args.repeat)
            tc, oc = best_time(getattr(kernels.compiled_backend, name), fargs, args.repeat)
            print(f"{label:32s} {tp:10.4f} {tc:11.4f} {tp / tc:7.1f}x {max_diff(op, oc):11.2e}")


if __name__ == "__main__":
    main()
