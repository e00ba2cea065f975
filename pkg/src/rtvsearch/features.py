"""Feature store (url -> feature, with extraction reuse) and the synthetic
feature provider used in place of a real image model."""

from __future__ import annotations

import functools
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .core import check_vector
from .errors import SnapshotFormatError

STORE_MAGIC = b"JVSK"
STORE_VERSION = 1

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x00000100000001B3
_MASK64 = (1 << 64) - 1

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)

FeatureProvider = Callable[[str], np.ndarray]


def fnv1a_64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & _MASK64
    return h


@functools.lru_cache(maxsize=8)
def _gamma_steps(n: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        steps = _SM_GAMMA * np.arange(1, n + 1, dtype=np.uint64)
    steps.setflags(write=False)
    return steps


def splitmix64(state: int, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 seeded with ``state``.

    SplitMix64 is counter based (output i mixes ``state + (i+1)*gamma``),
    so the whole sequence is computed at once. Array arithmetic on uint64
    wraps silently, so no errstate guard is needed.
    """
    z = _gamma_steps(n) + np.uint64(state & _MASK64)
    z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
    z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
    return z ^ (z >> np.uint64(31))


def synthetic_extract(url: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm float32 vector for ``url``.

    Draws ``dim`` uniforms in [-1, 1) from SplitMix64 seeded with
    ``fnv1a_64(url) ^ seed`` and L2-normalizes them.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    raw = splitmix64(fnv1a_64(url) ^ (seed & _MASK64), dim)
    # top 53 bits -> uniform double in [0, 1)
    u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    v = 2.0 * u - 1.0
    norm = np.sqrt(np.dot(v, v))
    if norm == 0.0:
        v[0], norm = 1.0, 1.0
    return (v / norm).astype(np.float32)


@dataclass(frozen=True)
class SyntheticProvider:
    """Callable provider wrapping :func:`synthetic_extract`."""

    dim: int
    seed: int = 0

    def __call__(self, url: str) -> np.ndarray:
        return synthetic_extract(url, self.dim, self.seed)


@dataclass(frozen=True)
class FeatureRecord:
    url: str
    feature: np.ndarray
    extracted_at: int


class FeatureStore:
    """Persistent url -> feature map that avoids repeated extraction."""

    def __init__(self, dim: int, clock: Callable[[], float] = time.time):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._records: dict[str, FeatureRecord] = {}
        self._lock = threading.Lock()
        self._clock = clock
        self.total_extractions = 0
        self.cache_hits = 0

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, url: str) -> bool:
        return url in self._records

    def get(self, url: str) -> np.ndarray | None:
        rec = self._records.get(url)
        return None if rec is None else rec.feature

    def record(self, url: str) -> FeatureRecord:
        return self._records[url]

    def urls(self) -> list[str]:
        return list(self._records)

    def put(self, url: str, feature, extracted_at: int | None = None) -> np.ndarray:
        """Store a feature without counting an extraction (imports, snapshots)."""
        f = check_vector(feature, self.dim).copy()
        f.setflags(write=False)
        ts = int(self._clock()) if extracted_at is None else extracted_at
        with self._lock:
            rec = self._records.setdefault(url, FeatureRecord(url, f, ts))
        return rec.feature

    def get_or_extract(self, url: str, provider: FeatureProvider) -> tuple[np.ndarray, bool]:
        if not url:
            raise ValueError("url must be non-empty")
        rec = self._records.get(url)
        if rec is not None:
            with self._lock:
                self.cache_hits += 1
            return rec.feature, True
        # extraction runs outside the lock; concurrent extractors of one url race
        # and the first stored result wins
        f = check_vector(provider(url), self.dim).copy()
        f.setflags(write=False)
        with self._lock:
            self.total_extractions += 1
            rec = self._records.setdefault(url, FeatureRecord(url, f, int(self._clock())))
        return rec.feature, False

    def subset(self, urls) -> "FeatureStore":
        out = FeatureStore(self.dim, self._clock)
        for u in urls:
            rec = self._records[u]
            out._records[u] = rec
        return out

    def persist(self, path) -> None:
        with self._lock:
            records = list(self._records.values())
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC + bytes([STORE_VERSION]))
            fh.write(struct.pack(">IQ", self.dim, len(records)))
            for rec in records:
                raw = rec.url.encode("utf-8")
                fh.write(struct.pack(">I", len(raw)) + raw)
                fh.write(struct.pack(">Q", rec.extracted_at))
                fh.write(rec.feature.astype("<f4").tobytes())

    save = persist

    @classmethod
    def load(cls, path, clock: Callable[[], float] = time.time) -> "FeatureStore":
        data = Path(path).read_bytes()
        if data[:4] != STORE_MAGIC:
            raise SnapshotFormatError("bad feature-store magic", 0)
        if len(data) < 17:
            raise SnapshotFormatError("truncated feature-store header", len(data))
        if data[4] != STORE_VERSION:
            raise SnapshotFormatError(f"unsupported feature-store version {data[4]}", 4)
        dim, count = struct.unpack_from(">IQ", data, 5)
        if dim < 1:
            raise SnapshotFormatError("dimension must be positive", 5)
        store = cls(dim, clock)
        records = store._records
        pos = 17
        vec_bytes = 4 * dim
        for _ in range(count):
            if pos + 4 > len(data):
                raise SnapshotFormatError("truncated record header", pos)
            (ulen,) = struct.unpack_from(">I", data, pos)
            pos += 4
            if pos + ulen + 8 + vec_bytes > len(data):
                raise SnapshotFormatError("truncated record", pos)
            try:
                url = data[pos:pos + ulen].decode("utf-8")
            except UnicodeDecodeError:
                raise SnapshotFormatError("url is not valid UTF-8", pos) from None
            if not url or url in records:
                raise SnapshotFormatError(f"empty or duplicate url {url!r}", pos)
            pos += ulen
            (ts,) = struct.unpack_from(">Q", data, pos)
            pos += 8
            f = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float32)
            if not np.isfinite(f).all():
                raise SnapshotFormatError("non-finite feature component", pos)
            f.setflags(write=False)
            pos += vec_bytes
            records[url] = FeatureRecord(url, f, ts)
        if pos != len(data):
            raise SnapshotFormatError("trailing bytes after last record", pos)
        return store
