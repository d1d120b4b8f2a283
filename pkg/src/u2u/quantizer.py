"""Discrete unit inventory: k-means codebooks over feature frames.

Also owns the on-disk formats for feature matrices (``U2UF``) and
codebooks (``U2UC``). All integers and floats are little-endian.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (BadMagic, DimMismatch, TooFewFrames, TruncatedFile, UnitOutOfRange,
                     VersionUnsupported)
from .features import FeatureKind, FeatureMatrix

FEATURE_MAGIC = b"U2UF"
CODEBOOK_MAGIC = b"U2UC"
FORMAT_VERSION = 1


@dataclass
class Codebook:
    centroids: np.ndarray
    feature_kind: FeatureKind = FeatureKind.MFCC
    seed: int = 0
    iterations: int = 0
    objective: float = float("nan")
    history: list = field(default_factory=list)
    initial_centroids: np.ndarray = None
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("codebook needs a (k >= 2) x dim centroid matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("codebook has non-finite centroids")
        self.feature_kind = FeatureKind.parse(self.feature_kind)

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    _, d2 = kernels.nearest_centroid(x, centers[:1])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise TooFewFrames(f"only {j} distinct frames available for k={k}")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        while d2[idx] == 0:  # guard against landing on a zero-weight point at the boundary
            idx -= 1
        centers[j] = x[idx]
        _, dj = kernels.nearest_centroid(x, centers[j:j + 1])
        d2 = np.minimum(d2, dj)
    return centers


def lloyd_update(x, centers, labels, dists):
    """One centroid update for fixed assignments, with farthest-point repair.

    Returns new centers. An empty cluster takes the frame that is currently
    farthest from its own centroid; each repair claims a different frame.
    """
    k, dim = centers.shape
    sums = np.zeros((k, dim))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    new = centers.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if empty.size:
        # singletons would leave a duplicate centroid behind
        donors = np.flatnonzero(counts[labels] > 1)
        order = donors[np.argsort(-dists[donors], kind="stable")]
        for j, idx in zip(empty, order):
            new[j] = x[idx]
    return new


def train_codebook(frames, k=100, seed=0, max_iter=100, rel_tol=1e-6, feature_kind=FeatureKind.MFCC):
    """Lloyd's algorithm from k-means++ seeding.

    The objective is the mean squared L2 distance of each frame to its
    nearest centroid. Iteration stops after ``max_iter`` assignment steps
    or once the relative decrease drops below ``rel_tol``.
    """
    if isinstance(frames, FeatureMatrix):
        feature_kind = frames.kind
        frames = frames.data
    if isinstance(frames, (list, tuple)):
        mats = [f.data if isinstance(f, FeatureMatrix) else np.asarray(f) for f in frames]
        if len({m.shape[1] for m in mats if m.ndim == 2}) > 1 or any(m.ndim != 2 for m in mats):
            raise DimMismatch("all frame matrices must share the same dimension")
        frames = np.concatenate(mats, axis=0) if mats else np.zeros((0, 1))
    x = np.ascontiguousarray(frames, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 2:
        raise ValueError("k must be >= 2")
    if x.shape[0] < k:
        raise TooFewFrames(f"{x.shape[0]} frames for k={k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    initial = centers.copy()
    history = []
    labels, dists = kernels.nearest_centroid(x, centers)
    it = 0
    while True:
        obj = float(dists.mean())
        history.append(obj)
        it += 1
        if obj == 0.0 or it >= max_iter:
            break
        if len(history) > 1 and (history[-2] - obj) / history[-2] < rel_tol:
            break
        centers = lloyd_update(x, centers, labels, dists)
        labels, dists = kernels.nearest_centroid(x, centers)
    return Codebook(centers, feature_kind, seed=seed, iterations=it, objective=history[-1],
                    history=history, initial_centroids=initial)


def quantize(features, cb):
    """Nearest-centroid unit id per frame (squared L2, ties to lowest id)."""
    data = features.data if isinstance(features, FeatureMatrix) else np.asarray(features)
    if data.ndim != 2 or data.shape[1] != cb.dim:
        raise DimMismatch(f"features have dim {data.shape[-1]}, codebook has {cb.dim}")
    if data.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    labels, _ = kernels.nearest_centroid(data, cb.centroids)
    return labels


def invert(units, cb):
    ids = np.asarray(units, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= cb.k):
        raise UnitOutOfRange(f"unit ids must lie in [0, {cb.k})")
    return FeatureMatrix(cb.centroids[ids].reshape(len(ids), cb.dim), cb.feature_kind)


def distortion(features, cb):
    data = features.data if isinstance(features, FeatureMatrix) else np.asarray(features)
    recon = invert(quantize(data, cb), cb).data
    return float(((np.asarray(data, dtype=np.float64) - recon) ** 2).sum(axis=1).mean())


# -- file formats ---------------------------------------------------------

_FEAT_HEADER = struct.Struct("<4sIIIB")
_CB_HEADER = struct.Struct("<4sIIIBQ")


def _check_magic(blob, magic, what):
    if len(blob) < 4 or blob[:4] != magic:
        raise BadMagic(f"not a {what} file (magic {blob[:4]!r}, expected {magic!r})")


def feature_bytes(fm):
    data = np.ascontiguousarray(fm.data, dtype="<f4")
    return _FEAT_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, data.shape[0], data.shape[1], int(fm.kind)) \
        + data.tobytes()


def export_features(fm, path):
    with open(path, "wb") as f:
        f.write(feature_bytes(fm))


def parse_features(blob, kind=FeatureKind.IMPORTED):
    _check_magic(blob, FEATURE_MAGIC, "feature")
    if len(blob) < _FEAT_HEADER.size:
        raise TruncatedFile("feature header truncated")
    _, version, frames, dims, stored_kind = _FEAT_HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"feature file version {version}")
    need = frames * dims * 4
    payload = blob[_FEAT_HEADER.size:]
    if len(payload) < need:
        raise TruncatedFile(f"header claims {frames}x{dims} values, payload holds {len(payload) // 4}")
    data = np.frombuffer(payload[:need], dtype="<f4").reshape(frames, dims).astype(np.float32)
    return FeatureMatrix(data, FeatureKind.parse(stored_kind) if kind is None else kind)


def import_features(path):
    """Read an externally computed feature matrix; ``kind`` is always IMPORTED."""
    with open(path, "rb") as f:
        return parse_features(f.read(), FeatureKind.IMPORTED)


def load_features(path):
    """Like ``import_features`` but keeps the kind recorded in the file."""
    with open(path, "rb") as f:
        return parse_features(f.read(), kind=None)


def save_codebook(cb, path):
    c = np.ascontiguousarray(cb.centroids, dtype="<f4")
    blob = _CB_HEADER.pack(CODEBOOK_MAGIC, FORMAT_VERSION, cb.k, cb.dim, int(cb.feature_kind), cb.seed) \
        + c.tobytes() + struct.pack("<d", cb.objective)
    with open(path, "wb") as f:
        f.write(blob)


def load_codebook(path):
    with open(path, "rb") as f:
        blob = f.read()
    _check_magic(blob, CODEBOOK_MAGIC, "codebook")
    if len(blob) < _CB_HEADER.size:
        raise TruncatedFile("codebook header truncated")
    _, version, k, dims, kind, seed = _CB_HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"codebook version {version}")
    need = k * dims * 4 + 8
    body = blob[_CB_HEADER.size:]
    if len(body) < need:
        raise TruncatedFile("codebook payload truncated")
    cent = np.frombuffer(body[:k * dims * 4], dtype="<f4").reshape(k, dims).astype(np.float32)
    (obj,) = struct.unpack_from("<d", body, k * dims * 4)
    return Codebook(cent, FeatureKind(kind), seed=seed, objective=obj)
