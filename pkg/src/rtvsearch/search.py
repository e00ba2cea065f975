"""Three-tier query path: searchers scan one partition each, brokers fan out
to a subset of searchers and merge, blenders featurize the query, fan out to
all brokers, merge and rank.

Every tier exposes ``search(query, k, nprobe) -> PartialResult``, so local
objects and remote clients plug into each other interchangeably.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import SearchHit, check_vector, distances_to, merge_top_k
from .features import FeatureProvider, FeatureStore
from .indexer import IndexPartition, partition_of

logger = logging.getLogger(__name__)

DEFAULT_DEADLINE = 0.5


class SearchUnavailableError(RuntimeError):
    """No target of a fan-out produced a result."""


@dataclass(frozen=True)
class RankWeights:
    w_sim: float = 1.0
    w_sales: float = 0.0
    w_praise: float = 0.0
    w_price: float = 0.0

    def score(self, hit: SearchHit) -> float:
        a = hit.attributes
        return (self.w_sim / (1.0 + hit.distance)
                + self.w_sales * math.log1p(a.sales)
                + self.w_praise * math.log1p(a.praise)
                - self.w_price * math.log1p(a.price))


@dataclass(frozen=True)
class QueryRequest:
    """A user query; exactly one of ``vector`` and ``url`` is set."""

    vector: np.ndarray | None = None
    url: str | None = None
    k: int = 10
    nprobe: int = 1
    weights: RankWeights = field(default_factory=RankWeights)

    def __post_init__(self):
        if (self.vector is None) == (self.url is None):
            raise ValueError("exactly one of vector and url must be given")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.nprobe < 1:
            raise ValueError("nprobe must be positive")


@dataclass(frozen=True)
class PartialResult:
    hits: list[SearchHit]
    missing: tuple[int, ...] = ()

    @property
    def degraded(self) -> bool:
        return bool(self.missing)


class SearchNode(Protocol):
    def search(self, query: np.ndarray, k: int, nprobe: int) -> PartialResult: ...


def rank(hits: Sequence[SearchHit], w: RankWeights = RankWeights()) -> list[SearchHit]:
    """Score by similarity and damped attributes; highest score first."""
    scored = [replace(h, score=w.score(h)) for h in hits]
    scored.sort(key=lambda h: (-h.score, h.distance, h.partition_id, h.image_index))
    return scored


def _top_k(d: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest (distance, id) pairs, in order."""
    if d.size > k:
        kth = np.partition(d, k - 1)[k - 1]
        sel = np.flatnonzero(d <= kth)
        order = sel[np.lexsort((ids[sel], d[sel]))]
    else:
        order = np.lexsort((ids, d))
    return order[:k]


def searcher_query(state: IndexPartition, q, k: int, nprobe: int = 1) -> list[SearchHit]:
    """Scan the ``nprobe`` nearest lists, skip invalid images, keep the k best."""
    if k < 1:
        raise ValueError("k must be positive")
    q = check_vector(q, state.dim)
    lists = state.codebook.nearest_lists(q, nprobe)
    ids = state.inverted.scan_many(lists)
    if ids.size:
        ids = ids[state.forward.valid_mask(ids)]
    if not ids.size:
        return []
    d = distances_to(state.vectors.rows(ids), q)
    fwd = state.forward
    pid = state.partition_id
    out = []
    for pos in _top_k(d, ids, k):
        dist = float(d[pos])
        out.append(SearchHit(int(ids[pos]), pid, dist, 1.0 / (1.0 + dist),
                             fwd.get_entry(int(ids[pos]))))
    return out


class Searcher:
    """Searcher tier around one :class:`IndexPartition`."""

    def __init__(self, state: IndexPartition):
        self.state = state

    @property
    def partition_id(self) -> int:
        return self.state.partition_id

    def search(self, query, k: int, nprobe: int = 1) -> PartialResult:
        return PartialResult(searcher_query(self.state, query, k, nprobe))


class _FanOut:
    def __init__(self, deadline: float | None, max_workers: int):
        self.deadline = deadline
        self._pool = ThreadPoolExecutor(max_workers, thread_name_prefix=type(self).__name__.lower())

    def _call(self, node: SearchNode, q, k, nprobe) -> PartialResult:
        fut = self._pool.submit(node.search, q, k, nprobe)
        try:
            return fut.result(timeout=self.deadline)
        except FutureTimeout:
            fut.cancel()
            raise TimeoutError(f"no answer within {self.deadline}s") from None

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)


class Broker(_FanOut):
    """Fans a query out to one replica of each owned partition and merges.

    ``replicas`` maps partition id to its replicas in preference order; a
    failed or late replica is retried once on the next replica.
    """

    def __init__(self, replicas: Mapping[int, Sequence[SearchNode]],
                 deadline: float | None = DEFAULT_DEADLINE, max_workers: int = 64):
        if not replicas:
            raise ValueError("a broker needs at least one partition")
        for pid, reps in replicas.items():
            if not reps:
                raise ValueError(f"partition {pid} has no replica")
        super().__init__(deadline, max_workers)
        self.replicas = {int(p): list(r) for p, r in replicas.items()}

    @property
    def partitions(self) -> tuple[int, ...]:
        return tuple(sorted(self.replicas))

    def _query_partition(self, pid: int, q, k, nprobe) -> PartialResult:
        last_exc: Exception | None = None
        for replica in self.replicas[pid][:2]:
            try:
                return self._call(replica, q, k, nprobe)
            except Exception as exc:  # any replica failure means "try the next one"
                logger.warning("partition %d replica failed: %s", pid, exc)
                last_exc = exc
        raise SearchUnavailableError(f"partition {pid} unavailable") from last_exc

    def search(self, query, k: int, nprobe: int = 1) -> PartialResult:
        q = check_vector(query)
        pids = self.partitions
        if len(pids) == 1:
            futures = None
            outcomes = []
            try:
                outcomes.append(self._query_partition(pids[0], q, k, nprobe))
            except SearchUnavailableError:
                outcomes.append(None)
        else:
            futures = [self._pool.submit(self._query_partition, p, q, k, nprobe) for p in pids]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except SearchUnavailableError:
                    outcomes.append(None)
        missing = tuple(p for p, o in zip(pids, outcomes) if o is None)
        ok = [o for o in outcomes if o is not None]
        if not ok:
            raise SearchUnavailableError("all partitions failed")
        missing += tuple(p for o in ok for p in o.missing)
        return PartialResult(merge_top_k([o.hits for o in ok], k), tuple(sorted(missing)))


class Blender(_FanOut):
    """Top tier: resolves url queries, fans out to every broker, merges, ranks.

    ``brokers`` is a sequence of ``(node, partitions)`` pairs; the partition
    list is what gets reported missing when that broker fails entirely.
    """

    def __init__(self, brokers: Sequence[tuple[SearchNode, Sequence[int]]],
                 provider: FeatureProvider | None = None, store: FeatureStore | None = None,
                 deadline: float | None = 4 * DEFAULT_DEADLINE, max_workers: int = 64):
        if not brokers:
            raise ValueError("a blender needs at least one broker")
        super().__init__(deadline, max_workers)
        self.brokers = [(node, tuple(parts)) for node, parts in brokers]
        self.provider = provider
        self.store = store

    def featurize(self, request: QueryRequest) -> np.ndarray:
        if request.vector is not None:
            return check_vector(request.vector)
        if self.store is not None:
            known = self.store.get(request.url)
            if known is not None:
                return known
            if self.provider is not None:
                return self.store.get_or_extract(request.url, self.provider)[0]
        if self.provider is None:
            raise ValueError("url queries need a feature provider")
        return check_vector(self.provider(request.url))

    def search(self, query, k: int, nprobe: int = 1) -> PartialResult:
        return self.query(QueryRequest(vector=np.asarray(query), k=k, nprobe=nprobe))

    def query(self, request: QueryRequest) -> PartialResult:
        q = self.featurize(request)
        k, nprobe = request.k, request.nprobe
        if len(self.brokers) == 1:
            calls = [(self.brokers[0], self._try(self.brokers[0][0], q, k, nprobe))]
        else:
            futs = [(b, self._pool.submit(self._try, b[0], q, k, nprobe)) for b in self.brokers]
            calls = [(b, f.result()) for b, f in futs]
        ok = [r for _, r in calls if r is not None]
        if not ok:
            raise SearchUnavailableError("all brokers failed")
        missing = {p for (_, parts), r in calls if r is None for p in parts}
        missing.update(p for r in ok for p in r.missing)
        merged = merge_top_k([r.hits for r in ok], k)
        return PartialResult(rank(merged, request.weights), tuple(sorted(missing)))

    def _try(self, node, q, k, nprobe) -> PartialResult | None:
        try:
            return self._call(node, q, k, nprobe)
        except Exception as exc:
            logger.warning("broker failed: %s", exc)
            return None


def split_partitions(n_partitions: int, n_brokers: int) -> list[list[int]]:
    """Contiguous, disjoint, exhaustive partition subsets per broker."""
    if not 1 <= n_brokers <= n_partitions:
        raise ValueError("need 1 <= brokers <= partitions")
    bounds = np.linspace(0, n_partitions, n_brokers + 1).round().astype(int)
    return [list(range(bounds[i], bounds[i + 1])) for i in range(n_brokers)]


def build_local_cluster(partitions: Sequence[IndexPartition], n_brokers: int = 1,
                        provider: FeatureProvider | None = None,
                        deadline: float | None = DEFAULT_DEADLINE,
                        assignment: Sequence[Sequence[int]] | None = None) -> Blender:
    """Wire searchers, brokers and one blender in-process."""
    searchers = {p.partition_id: Searcher(p) for p in partitions}
    if sorted(searchers) != list(range(len(partitions))):
        raise ValueError("partition ids must be 0..P-1")
    subsets = [list(s) for s in assignment] if assignment else split_partitions(len(partitions), n_brokers)
    validate_assignment(subsets, len(partitions))
    brokers = [(Broker({p: [searchers[p]] for p in sub}, deadline), sub) for sub in subsets]
    return Blender(brokers, provider=provider,
                   deadline=None if deadline is None else 4 * deadline)


def validate_assignment(subsets: Sequence[Sequence[int]], n_partitions: int) -> None:
    flat = [p for s in subsets for p in s]
    if sorted(flat) != list(range(n_partitions)):
        raise ValueError("broker partition subsets must be disjoint and cover all partitions")
    if any(not s for s in subsets):
        raise ValueError("every broker must own at least one partition")


@dataclass
class Topology:
    """Static deployment layout, usually read from the config file."""

    partitions: int
    searchers: list[list[str]]          # replica addresses per partition
    brokers: list[str]
    broker_partitions: list[list[int]]
    blenders: list[str]

    def validate(self) -> None:
        if self.partitions < 1:
            raise ValueError("topology.partitions must be positive")
        if len(self.searchers) != self.partitions or any(not r for r in self.searchers):
            raise ValueError("topology.searchers needs at least one address per partition")
        if len(self.brokers) != len(self.broker_partitions):
            raise ValueError("topology.brokers and topology.broker_partitions differ in length")
        validate_assignment(self.broker_partitions, self.partitions)


__all__ = [
    "Blender", "Broker", "PartialResult", "QueryRequest", "RankWeights", "SearchUnavailableError",
    "Searcher", "Topology", "build_local_cluster", "partition_of", "rank", "searcher_query",
    "split_partitions",
]
