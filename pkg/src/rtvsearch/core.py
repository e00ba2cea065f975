"""Shared domain types, distance computation and top-k merging."""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.utils import check_array

DEFAULT_DIM = 128


class DimensionMismatchError(ValueError):
    """A vector does not have the dimension the index was built for."""


def check_vector(v, dim: int | None = None) -> np.ndarray:
    """Validate a single feature vector and return it as a 1-D float32 array.

    Components must be finite; ``dim`` (when given) must match exactly.
    """
    # hot path (every query and insert): skip check_array's overhead
    arr = np.asarray(v, dtype=np.float32)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty 1-D feature vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("feature vector contains NaN or infinity")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatchError(f"expected dimension {dim}, got {arr.shape[0]}")
    return arr


def check_vectors(X, dim: int | None = None) -> np.ndarray:
    """2-D counterpart of :func:`check_vector`."""
    arr = check_array(X, dtype=np.float32, ensure_all_finite=True)
    if dim is not None and arr.shape[1] != dim:
        raise DimensionMismatchError(f"expected dimension {dim}, got {arr.shape[1]}")
    return arr


def euclidean_distance(a, b) -> float:
    """Euclidean distance, accumulated in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise DimensionMismatchError("vectors must have at least one component")
    diff = a - b
    d2 = float(np.dot(diff, diff))
    if not math.isfinite(d2):
        raise ValueError("vectors contain NaN or infinity")
    return math.sqrt(d2)


def distances_to(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distances from every row of ``rows`` to ``q`` (float64).

    Uses explicit differences rather than the dot-product expansion, so the
    values agree with :func:`euclidean_distance` up to summation order.
    """
    diff = rows.astype(np.float64) - q.astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass(frozen=True)
class ProductAttributes:
    product_id: int
    sales: int
    praise: int
    price: int
    url: str


class MessageKind(enum.Enum):
    ATTRIBUTE_UPDATE = "UPDATE"
    PRODUCT_ADD = "ADD"
    PRODUCT_REMOVE = "REMOVE"


NUMERIC_FIELDS = ("sales", "praise", "price")
UPDATE_FIELDS = NUMERIC_FIELDS + ("available",)


@dataclass(frozen=True)
class UpdateMessage:
    """One product event from the message stream.

    ``urls`` and the numeric attributes are only meaningful for
    ``PRODUCT_ADD``; ``changes`` only for ``ATTRIBUTE_UPDATE``.
    """

    kind: MessageKind
    product_id: int
    sales: int = 0
    praise: int = 0
    price: int = 0
    urls: tuple[str, ...] = ()
    changes: tuple[tuple[str, int], ...] = ()

    @classmethod
    def add(cls, product_id: int, urls: Sequence[str], sales: int = 0,
            praise: int = 0, price: int = 0) -> "UpdateMessage":
        return cls(MessageKind.PRODUCT_ADD, product_id, sales, praise, price, tuple(urls))

    @classmethod
    def update(cls, product_id: int, **changes: int) -> "UpdateMessage":
        return cls(MessageKind.ATTRIBUTE_UPDATE, product_id,
                   changes=tuple(changes.items()))

    @classmethod
    def remove(cls, product_id: int) -> "UpdateMessage":
        return cls(MessageKind.PRODUCT_REMOVE, product_id)

    def validate(self) -> None:
        """Raise ``ValueError`` if the message is malformed."""
        if not isinstance(self.kind, MessageKind):
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.product_id <= 0:
            raise ValueError("product_id must be positive")
        if self.kind is MessageKind.PRODUCT_ADD:
            if not self.urls:
                raise ValueError("ADD must carry at least one image url")
            for u in self.urls:
                if not u or any(c in u for c in "\t\n\r;"):
                    raise ValueError(f"invalid url {u!r}")
            if min(self.sales, self.praise, self.price) < 0:
                raise ValueError("attributes must be non-negative")
        elif self.kind is MessageKind.ATTRIBUTE_UPDATE:
            if not self.changes:
                raise ValueError("UPDATE must carry at least one change")
            for name, value in self.changes:
                if name not in UPDATE_FIELDS:
                    raise ValueError(f"unknown field {name!r}")
                if value < 0 or (name == "available" and value not in (0, 1)):
                    raise ValueError(f"invalid value {value!r} for {name}")


@dataclass(frozen=True)
class SearchHit:
    image_index: int
    partition_id: int
    distance: float
    score: float
    attributes: ProductAttributes = field(compare=False)

    @property
    def url(self) -> str:
        return self.attributes.url

    def sort_key(self) -> tuple[float, int, int]:
        return (self.distance, self.partition_id, self.image_index)


def merge_top_k(partials: Iterable[Iterable[SearchHit]], k: int) -> list[SearchHit]:
    """Global ``k`` nearest hits over several partial result lists.

    Ordered by (distance, partition_id, image_index).
    """
    if k < 1:
        raise ValueError("k must be positive")
    return heapq.nsmallest(k, (h for part in partials for h in part), key=SearchHit.sort_key)
