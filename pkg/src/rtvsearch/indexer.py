"""Full and real-time indexing of one partition.

Both paths run the same three handlers; a full build replays the whole log
into an empty partition and then compacts the url buffer.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .core import MessageKind, ProductAttributes, UpdateMessage, check_vector
from .errors import MessageFormatError
from .features import FeatureProvider, FeatureStore, fnv1a_64
from .forward import ForwardIndex
from .inverted import DEFAULT_LIST_CAPACITY, InvertedIndex
from .messages import Envelope, parse_message
from .quantizer import Codebook
from .stats import UpdateStats

logger = logging.getLogger(__name__)

CODEBOOK_FILE = "codebook.jvsc"
FORWARD_FILE = "forward.jvsf"
INVERTED_FILE = "inverted.jvsi"
STORE_FILE = "features.jvsk"


def partition_of(url: str, n_partitions: int) -> int:
    """Partition owning ``url``: FNV-1a 64 of its UTF-8 bytes, modulo P."""
    if n_partitions < 1:
        raise ValueError("partition count must be positive")
    return fnv1a_64(url) % n_partitions


class VectorSet:
    """Row-per-image float32 working set, grown by copy-then-install."""

    def __init__(self, dim: int, capacity: int = 4096):
        self.dim = dim
        self._rows = np.zeros((max(1, capacity), dim), dtype=np.float32)

    def put(self, index: int, vector: np.ndarray) -> None:
        rows = self._rows
        if index >= rows.shape[0]:
            cap = rows.shape[0]
            while cap <= index:
                cap *= 2
            grown = np.zeros((cap, self.dim), dtype=np.float32)
            grown[:rows.shape[0]] = rows
            self._rows = rows = grown
        rows[index] = vector

    def rows(self, indexes: np.ndarray) -> np.ndarray:
        return self._rows[indexes]

    def row(self, index: int) -> np.ndarray:
        return self._rows[index].copy()


@dataclass
class ProductRecord:
    images: list[int]
    available: bool = True


@dataclass
class ProductRegistry:
    products: dict[int, ProductRecord] = field(default_factory=dict)
    urls: dict[str, int] = field(default_factory=dict)

    def __contains__(self, product_id: int) -> bool:
        return product_id in self.products

    def get(self, product_id: int) -> ProductRecord | None:
        return self.products.get(product_id)


@dataclass
class IndexerCounters:
    applied: int = 0
    malformed: int = 0
    dropped: int = 0
    filtered: int = 0
    extraction_failures: int = 0


@dataclass(slots=True)
class Ack:
    status: str              # applied | dropped | filtered | malformed
    kind: MessageKind | None
    product_id: int | None
    images: int = 0
    latency: float = 0.0


class IndexPartition:
    """Searcher-local index state for one partition.

    One thread runs the handlers; any number of threads may search
    concurrently.
    """

    def __init__(self, codebook: Codebook, store: FeatureStore | None = None,
                 provider: FeatureProvider | None = None, partition_id: int = 0,
                 n_partitions: int = 1, list_capacity: int = DEFAULT_LIST_CAPACITY,
                 background_copy: bool = True, forward_capacity: int = 4096):
        if not 0 <= partition_id < n_partitions:
            raise ValueError("partition_id must be in [0, n_partitions)")
        self.codebook = codebook
        self.dim = codebook.dim
        self.store = store if store is not None else FeatureStore(self.dim)
        if self.store.dim != self.dim:
            raise ValueError("feature store dimension does not match the codebook")
        self.provider = provider
        self.partition_id = partition_id
        self.n_partitions = n_partitions
        self.forward = ForwardIndex(capacity=forward_capacity)
        self.inverted = InvertedIndex(codebook.n_lists, list_capacity, background_copy)
        self.vectors = VectorSet(self.dim, forward_capacity)
        self.registry = ProductRegistry()
        self.counters = IndexerCounters()
        self.stats = UpdateStats()
        self.update_latencies: list[float] = []
        self._foreign: set[int] = set()

    # ---- accounting helpers -------------------------------------------------

    def __len__(self) -> int:
        return len(self.forward)

    def owns(self, url: str) -> bool:
        return self.n_partitions == 1 or partition_of(url, self.n_partitions) == self.partition_id

    def _ack(self, status: str, msg: UpdateMessage | None, images: int = 0) -> Ack:
        if status == "applied":
            self.counters.applied += 1
        else:
            setattr(self.counters, status, getattr(self.counters, status) + 1)
        return Ack(status, msg.kind if msg else None, msg.product_id if msg else None, images)

    def _unknown(self, msg: UpdateMessage) -> Ack:
        if msg.product_id in self._foreign:
            return self._ack("filtered", msg)
        logger.debug("dropping %s for unknown product %d", msg.kind.name, msg.product_id)
        return self._ack("dropped", msg)

    # ---- handlers -----------------------------------------------------------

    def handle_message(self, msg: UpdateMessage) -> Ack:
        try:
            msg.validate()
        except (ValueError, AttributeError, TypeError):
            return self._ack("malformed", msg if isinstance(msg, UpdateMessage) else None)
        if msg.kind is MessageKind.ATTRIBUTE_UPDATE:
            return self.handle_update(msg.product_id, msg.changes, _msg=msg)
        if msg.kind is MessageKind.PRODUCT_ADD:
            return self.handle_insert(msg.product_id, msg.sales, msg.praise, msg.price,
                                      msg.urls, _msg=msg)
        return self.handle_delete(msg.product_id, _msg=msg)

    def _set_availability(self, rec: ProductRecord, available: bool) -> None:
        for i in rec.images:
            self.forward.set_validity(i, available)
        rec.available = available

    def handle_update(self, product_id: int, changes, _msg: UpdateMessage | None = None) -> Ack:
        msg = _msg or UpdateMessage(MessageKind.ATTRIBUTE_UPDATE, product_id, changes=tuple(changes))
        rec = self.registry.get(product_id)
        if rec is None:
            return self._unknown(msg)
        for name, value in msg.changes:
            if name == "available":
                self._set_availability(rec, bool(value))
            else:
                for i in rec.images:
                    self.forward.update_numeric(i, name, value)
        self.stats.record("attribute_update", len(rec.images))
        return self._ack("applied", msg, len(rec.images))

    def handle_insert(self, product_id: int, sales: int, praise: int, price: int,
                      urls, _msg: UpdateMessage | None = None) -> Ack:
        msg = _msg or UpdateMessage.add(product_id, urls, sales, praise, price)
        rec = self.registry.get(product_id)
        if rec is not None:
            # known product back on the market: reuse everything, extract nothing
            for i in rec.images:
                self.forward.update_numeric(i, "sales", sales)
                self.forward.update_numeric(i, "praise", praise)
                self.forward.update_numeric(i, "price", price)
            self._set_availability(rec, True)
            self.stats.record("image_addition", len(rec.images))
            self.stats.record("reused_addition", len(rec.images))
            return self._ack("applied", msg, len(rec.images))

        mine = [u for u in msg.urls if self.owns(u)]
        if not mine:
            self._foreign.add(product_id)
            return self._ack("filtered", msg)
        images: list[int] = []
        touched: set[int] = set()
        for url in mine:
            if url in self.registry.urls:
                logger.warning("url %r already indexed; skipping", url)
                self.counters.extraction_failures += 1
                continue
            try:
                if self.provider is None and url not in self.store:
                    raise LookupError("no feature provider configured")
                feature, _ = self.store.get_or_extract(url, self.provider)
            except Exception:
                logger.exception("feature extraction failed for %r", url)
                self.counters.extraction_failures += 1
                continue
            index = self.forward.append_entry(ProductAttributes(product_id, sales, praise, price, url))
            self.vectors.put(index, feature)
            list_id = self.codebook.assign(feature, checked=True)
            # attributes and vector are in place before the id becomes searchable
            self.inverted.append(list_id, index)
            touched.add(list_id)
            self.registry.urls[url] = index
            images.append(index)
        for l in touched:
            self.inverted.sync(l)
        if not images:
            return self._ack("dropped", msg)
        self._foreign.discard(product_id)
        self.registry.products[product_id] = ProductRecord(images, True)
        self.stats.record("image_addition", len(images))
        return self._ack("applied", msg, len(images))

    def handle_delete(self, product_id: int, _msg: UpdateMessage | None = None) -> Ack:
        msg = _msg or UpdateMessage.remove(product_id)
        rec = self.registry.get(product_id)
        if rec is None:
            return self._unknown(msg)
        self._set_availability(rec, False)
        self.stats.record("image_deletion", len(rec.images))
        return self._ack("applied", msg, len(rec.images))

    # ---- streams --------------------------------------------------------------

    def replay(self, source: Iterable) -> Iterator[Ack]:
        """Apply messages from ``source`` serially, yielding one ack each.

        Items may be :class:`UpdateMessage`, :class:`Envelope` (carrying the
        receipt time and an optional ticket), log lines, or
        :class:`MessageFormatError` instances from a tailed log.
        """
        for item in source:
            received = time.perf_counter()
            ticket = None
            if isinstance(item, Envelope):
                received, ticket, item = item.received_at, item.ticket, item.message
            if isinstance(item, str):
                try:
                    item = parse_message(item)
                except MessageFormatError:
                    item = None
                    ack = self._ack("malformed", None)
                else:
                    if item is None:
                        continue
            if isinstance(item, MessageFormatError):
                ack = self._ack("malformed", None)
            elif item is not None:
                ack = self.handle_message(item)
            latency = time.perf_counter() - received
            self.update_latencies.append(latency)
            ack.latency = latency
            if ticket is not None:
                ticket.set(ack)
            yield ack

    def run(self, source: Iterable) -> int:
        """Consume ``source`` to exhaustion; returns the number of messages seen."""
        n = 0
        for _ in self.replay(source):
            n += 1
        return n

    @classmethod
    def full_build(cls, message_log: Iterable, store: FeatureStore, codebook: Codebook,
                   **kwargs) -> "IndexPartition":
        kwargs.setdefault("background_copy", False)
        state = cls(codebook, store, **kwargs)
        state.run(message_log)
        state.compact()
        return state

    def compact(self) -> None:
        """Drop stale url bytes. Only call while no reader is active."""
        self.inverted.sync()
        self.forward = self.forward.compacted()

    # ---- introspection ------------------------------------------------------

    def feature_of(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self.forward):
            raise IndexError(index)
        return self.vectors.row(index)

    def valid_indexes(self) -> np.ndarray:
        n = len(self.forward)
        ids = np.arange(n, dtype=np.int64)
        return ids[self.forward.valid_mask(ids)] if n else ids

    # ---- snapshots ------------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.inverted.sync()
        self.codebook.save(d / CODEBOOK_FILE)
        self.forward.save(d / FORWARD_FILE)
        self.inverted.save(d / INVERTED_FILE)
        self.store.persist(d / STORE_FILE)

    @classmethod
    def load(cls, directory, provider: FeatureProvider | None = None, partition_id: int = 0,
             n_partitions: int = 1, list_capacity: int = DEFAULT_LIST_CAPACITY,
             background_copy: bool = True) -> "IndexPartition":
        d = Path(directory)
        codebook = Codebook.load(d / CODEBOOK_FILE)
        store = FeatureStore.load(d / STORE_FILE)
        state = cls(codebook, store, provider, partition_id, n_partitions,
                    list_capacity, background_copy)
        state.forward = fwd = ForwardIndex.load(d / FORWARD_FILE)
        state.inverted.close()
        state.inverted = InvertedIndex.load(d / INVERTED_FILE, list_capacity, background_copy)
        if state.inverted.n_lists != codebook.n_lists:
            raise ValueError("inverted-index list count does not match the codebook")
        if state.inverted.total_len() and int(max(
                (state.inverted.scan(l).max(initial=-1) for l in range(codebook.n_lists)))) >= len(fwd):
            raise ValueError("inverted index references images beyond the forward index")
        reg = state.registry
        for i in range(len(fwd)):
            e = fwd.get_entry(i)
            feature = store.get(e.url)
            if feature is None:
                raise ValueError(f"feature store has no record for {e.url!r}")
            state.vectors.put(i, feature)
            reg.urls[e.url] = i
            rec = reg.products.setdefault(e.product_id, ProductRecord([], False))
            rec.images.append(i)
            rec.available = rec.available or fwd.is_valid(i)
        return state

    def close(self) -> None:
        self.inverted.close()
