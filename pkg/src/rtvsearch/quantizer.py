"""k-means coarse quantizer: the codebook that defines the inverted lists."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import DimensionMismatchError, check_vector, check_vectors
from .errors import SnapshotFormatError

logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"JVSC"
CODEBOOK_VERSION = 1
MAX_TRAIN_SAMPLES = 100_000
_MASK64 = (1 << 64) - 1


def default_n_lists(n_samples: int) -> int:
    return max(1, round(math.sqrt(n_samples)))


@dataclass(frozen=True, eq=False)
class Codebook:
    """Trained centroids. Immutable; safe to share between threads."""

    centroids: np.ndarray
    seed: int = 0
    sse: float = 0.0
    n_iter: int = 0
    sse_history: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float32, copy=True)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ValueError(f"centroids must be a non-empty (N, D) array, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)
        c64 = c.astype(np.float64)
        object.__setattr__(self, "_c64", c64)
        object.__setattr__(self, "_c_sq", np.einsum("ij,ij->i", c64, c64))

    @property
    def n_lists(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def distances(self, feature) -> np.ndarray:
        """Squared distances from ``feature`` to every centroid (float64)."""
        return self._sq_dists(check_vector(feature, self.dim))

    def _sq_dists(self, f: np.ndarray) -> np.ndarray:
        diff = self._c64 - f.astype(np.float64)
        return np.einsum("ij,ij->i", diff, diff)

    def _nearest(self, f: np.ndarray, n: int) -> np.ndarray:
        """Indexes of the ``n`` nearest centroids, ties by lowest index.

        A mat-vec with the norm expansion picks candidates; only those within
        the expansion's rounding bound of the n-th smallest value get exact
        explicit-difference distances, so the answer equals a full exact scan.
        """
        f64 = f.astype(np.float64)
        ff = float(f64 @ f64)
        approx = self._c_sq - 2.0 * (self._c64 @ f64) + ff
        slack = 4.0 * (self.dim + 3) * np.finfo(np.float64).eps * (float(self._c_sq.max()) + ff)
        kth = approx.min() if n == 1 else np.partition(approx, n - 1)[n - 1]
        cand = np.flatnonzero(approx <= kth + slack)
        if cand.size == 1:
            return cand
        diff = self._c64[cand] - f64
        exact = np.einsum("ij,ij->i", diff, diff)
        return cand[np.lexsort((cand, exact))[:n]]

    def assign(self, feature, *, checked: bool = False) -> int:
        """Nearest centroid; ``checked=True`` skips validation of a known-good vector."""
        f = feature if checked else check_vector(feature, self.dim)
        if f.shape != (self.dim,):
            raise DimensionMismatchError(f"expected dimension {self.dim}, got {f.shape}")
        return int(self._nearest(f, 1)[0])

    def nearest_lists(self, feature, nprobe: int = 1) -> list[int]:
        if not 1 <= nprobe <= self.n_lists:
            raise ValueError(f"nprobe must be in [1, {self.n_lists}], got {nprobe}")
        return self._nearest(check_vector(feature, self.dim), nprobe).tolist()

    def save(self, path) -> None:
        n, d = self.centroids.shape
        with open(path, "wb") as fh:
            fh.write(CODEBOOK_MAGIC + bytes([CODEBOOK_VERSION]) + struct.pack(">II", d, n))
            fh.write(self.centroids.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        data = Path(path).read_bytes()
        if data[:4] != CODEBOOK_MAGIC:
            raise SnapshotFormatError("bad codebook magic", 0)
        if len(data) < 13:
            raise SnapshotFormatError("truncated codebook header", len(data))
        if data[4] != CODEBOOK_VERSION:
            raise SnapshotFormatError(f"unsupported codebook version {data[4]}", 4)
        d, n = struct.unpack_from(">II", data, 5)
        expected = 13 + 4 * n * d
        if len(data) != expected:
            raise SnapshotFormatError(
                f"codebook payload is {len(data)} bytes, expected {expected}", min(len(data), expected))
        c = np.frombuffer(data, dtype="<f4", count=n * d, offset=13).reshape(n, d)
        return cls(c)


def _sq_dists_exact(X: np.ndarray, C: np.ndarray, labels: np.ndarray) -> np.ndarray:
    diff = X - C[labels]
    return np.einsum("ij,ij->i", diff, diff)


def _candidate_labels(X32: np.ndarray, C: np.ndarray) -> np.ndarray:
    # expanded float32 form is fast but not exact; callers confirm changes exactly
    C32 = C.astype(np.float32)
    scores = (C32 * C32).sum(axis=1)[None, :] - 2.0 * (X32 @ C32.T)
    return np.argmin(scores, axis=1)


def _sq_dists_to_center(X, x_sq, c):
    d = np.maximum(x_sq - 2.0 * (X @ c) + c @ c, 0.0)
    near = np.flatnonzero(d <= 1e-6 * (x_sq + c @ c))
    if near.size:
        diff = X[near] - c
        d[near] = np.einsum("ij,ij->i", diff, diff)
    return d


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    x_sq = np.einsum("ij,ij->i", X, X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    closest = _sq_dists_to_center(X, x_sq, centers[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # only duplicates of chosen centers remain
            raise ValueError("n_lists exceeds the number of distinct samples")
        idx = int(rng.choice(n, p=closest / total))
        centers[j] = X[idx]
        np.minimum(closest, _sq_dists_to_center(X, x_sq, centers[j]), out=closest)
    return centers


def _update_centroids(X: np.ndarray, labels: np.ndarray, k: int, old: np.ndarray):
    counts = np.bincount(labels, minlength=k)
    order = np.argsort(labels, kind="stable")
    present = np.flatnonzero(counts)
    starts = np.concatenate(([0], np.cumsum(counts[present])[:-1]))
    sums = np.add.reduceat(X[order], starts, axis=0)
    C = old.copy()
    C[present] = sums / counts[present][:, None]
    return C, counts


def _repair_empty(X, C, labels, counts, point_d2):
    """Reseed each empty cluster with the point farthest from its centroid."""
    for j in np.flatnonzero(counts == 0):
        movable = counts[labels] > 1
        if not movable.any():
            break
        cand = np.where(movable, point_d2, -1.0)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
        C[j] = X[i]
        point_d2[i] = 0.0


def train(samples, n_lists: int, seed: int = 0, max_iters: int = 25,
          max_samples: int = MAX_TRAIN_SAMPLES) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding; deterministic for fixed inputs."""
    X = check_vectors(samples).astype(np.float64)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty sample set")
    if n_lists < 1:
        raise ValueError("n_lists must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    rng = np.random.default_rng(seed & _MASK64)
    if X.shape[0] > max_samples:
        X = X[np.sort(rng.choice(X.shape[0], size=max_samples, replace=False))]
    n_distinct = np.unique(X, axis=0).shape[0]
    if n_lists > n_distinct:
        raise ValueError(f"n_lists={n_lists} exceeds the {n_distinct} distinct samples")

    C = _kmeans_pp(X, n_lists, rng)
    X32 = X.astype(np.float32)
    labels = _candidate_labels(X32, C)
    point_d2 = _sq_dists_exact(X, C, labels)
    history = [float(point_d2.sum())]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        C, counts = _update_centroids(X, labels, n_lists, C)
        point_d2 = _sq_dists_exact(X, C, labels)
        _repair_empty(X, C, labels, counts, point_d2)

        cand = _candidate_labels(X32, C)
        moved = np.flatnonzero(cand != labels)
        if moved.size:
            cand_d2 = _sq_dists_exact(X[moved], C, cand[moved])
            better = cand_d2 < point_d2[moved]
            moved = moved[better]
            labels[moved] = cand[moved]
            point_d2[moved] = cand_d2[better]
        history.append(float(point_d2.sum()))
        logger.debug("kmeans iter %d: sse=%.6g changed=%d", n_iter, history[-1], moved.size)
        if moved.size == 0:
            break

    C32 = C.astype(np.float32)
    sse = float(_sq_dists_exact(X, C32.astype(np.float64), labels).sum())
    return Codebook(C32, seed=seed, sse=sse, n_iter=n_iter, sse_history=tuple(history))


def assign(codebook: Codebook, feature) -> int:
    return codebook.assign(feature)


def nearest_lists(codebook: Codebook, feature, nprobe: int = 1) -> list[int]:
    return codebook.nearest_lists(feature, nprobe)


class KMeansQuantizer(ClusterMixin, TransformerMixin, BaseEstimator):
    """Coarse quantizer estimator.

    Parameters
    ----------
    n_lists : int or None
        Number of centroids; ``None`` picks ``round(sqrt(n_samples))``.
    max_iter : int
        Upper bound on Lloyd iterations.
    random_state : int
        Seed for k-means++ seeding and sub-sampling.
    max_samples : int
        Training sets larger than this are uniformly sub-sampled.
    """

    def __init__(self, n_lists=None, max_iter=25, random_state=0,
                 max_samples=MAX_TRAIN_SAMPLES):
        self.n_lists = n_lists
        self.max_iter = max_iter
        self.random_state = random_state
        self.max_samples = max_samples

    def fit(self, X, y=None):
        X = check_vectors(X)
        n_lists = self.n_lists if self.n_lists is not None else default_n_lists(X.shape[0])
        self.codebook_ = train(X, n_lists, seed=self.random_state,
                               max_iters=self.max_iter, max_samples=self.max_samples)
        self.cluster_centers_ = self.codebook_.centroids
        self.inertia_ = self.codebook_.sse
        self.n_iter_ = self.codebook_.n_iter
        self.n_features_in_ = X.shape[1]
        self.labels_ = self.predict(X)
        return self

    def _sq_distances(self, X) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        X = check_vectors(X, self.codebook_.dim).astype(np.float64)
        C = self.codebook_.centroids.astype(np.float64)
        out = np.empty((X.shape[0], C.shape[0]))
        for j, c in enumerate(C):
            diff = X - c
            out[:, j] = np.einsum("ij,ij->i", diff, diff)
        return out

    def predict(self, X):
        return np.argmin(self._sq_distances(X), axis=1)

    def transform(self, X):
        """Euclidean distance from each row to every centroid."""
        return np.sqrt(self._sq_distances(X))

    def nearest_lists(self, x, nprobe=1):
        check_is_fitted(self, "codebook_")
        return self.codebook_.nearest_lists(x, nprobe)


__all__ = [
    "Codebook", "DimensionMismatchError", "KMeansQuantizer", "assign",
    "default_n_lists", "nearest_lists", "train",
]
