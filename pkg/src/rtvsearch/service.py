"""Wiring for the executables: load snapshots, run nodes, local deployments."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config, ConfigError
from .core import MessageKind, UpdateMessage
from .features import FeatureStore, SyntheticProvider
from .indexer import IndexPartition, partition_of
from .messages import MessageQueue, Ticket, read_message_log, tail_message_log
from .quantizer import Codebook, default_n_lists, train
from .search import Blender, Broker, Searcher, build_local_cluster
from .stats import format_counter_events
from .wire import NodeServer, RemoteNode, parse_address

logger = logging.getLogger(__name__)

COUNTER_LOG = "counters.tsv"


def partition_dir(data_dir, p: int) -> Path:
    return Path(data_dir) / f"part-{p:03d}"


def provider_from(cfg: Config) -> SyntheticProvider:
    return SyntheticProvider(cfg["index.dim"], cfg["index.feature_seed"])


@dataclass
class LoadSummary:
    messages: int
    malformed: int
    distinct_urls: int
    n_lists: int
    partitions: list[IndexPartition]

    def lines(self) -> list[str]:
        out = [f"messages\t{self.messages}", f"malformed\t{self.malformed}",
               f"distinct_urls\t{self.distinct_urls}", f"n_lists\t{self.n_lists}"]
        for st in self.partitions:
            p = st.partition_id
            out += [f"partition.{p}.entries\t{len(st.forward)}",
                    f"partition.{p}.valid\t{st.valid_indexes().size}",
                    f"partition.{p}.inverted\t{st.inverted.total_len()}",
                    f"partition.{p}.dropped\t{st.counters.dropped}"]
        return out


def build_partitions(messages: Sequence[UpdateMessage], cfg: Config,
                     store: FeatureStore | None = None) -> tuple[list[IndexPartition], int, int]:
    """Train the codebook on every added image and full-build each partition."""
    provider = provider_from(cfg)
    dim = cfg["index.dim"]
    store = store or FeatureStore(dim)
    urls = list(dict.fromkeys(u for m in messages if m.kind is MessageKind.PRODUCT_ADD for u in m.urls))
    for u in urls:
        store.get_or_extract(u, provider)
    n_parts = cfg["topology.partitions"]
    if urls:
        X = np.stack([store.get(u) for u in urls])
        n_distinct = np.unique(X, axis=0).shape[0]
        n_lists = cfg["index.n_lists"] or default_n_lists(len(urls))
        n_lists = min(n_lists, n_distinct)
        codebook = train(X, n_lists, seed=cfg["index.seed"], max_iters=cfg["index.max_iters"])
    else:
        codebook = Codebook(np.zeros((1, dim), dtype=np.float32), seed=cfg["index.seed"])
    by_part: dict[int, list[str]] = {p: [] for p in range(n_parts)}
    for u in urls:
        by_part[partition_of(u, n_parts)].append(u)
    parts = []
    for p in range(n_parts):
        st = IndexPartition.full_build(messages, store.subset(by_part[p]), codebook,
                                       provider=provider, partition_id=p, n_partitions=n_parts,
                                       list_capacity=cfg["index.list_capacity"])
        parts.append(st)
    return parts, len(urls), codebook.n_lists


def load_index(cfg: Config, log_path, strict: bool = False) -> LoadSummary:
    """Full indexing from a message log; writes four snapshots per partition."""
    log = read_message_log(log_path, strict=strict)
    for err in log.errors[:20]:
        logger.warning("skipped malformed line: %s", err)
    parts, n_urls, n_lists = build_partitions(log.messages, cfg)
    for st in parts:
        d = partition_dir(cfg["data.dir"], st.partition_id)
        st.save(d)
        events = [(h, k, c) for h, counts in sorted(st.stats.hourly.items()) for k, c in counts.items()]
        (d / COUNTER_LOG).write_text(format_counter_events(events), encoding="utf-8")
    return LoadSummary(len(log.messages), log.malformed, n_urls, n_lists, parts)


def open_partition(cfg: Config, p: int) -> IndexPartition:
    return IndexPartition.load(partition_dir(cfg["data.dir"], p), provider_from(cfg),
                               partition_id=p, n_partitions=cfg["topology.partitions"],
                               list_capacity=cfg["index.list_capacity"])


def open_partitions(cfg: Config) -> list[IndexPartition]:
    return [open_partition(cfg, p) for p in range(cfg["topology.partitions"])]


class LocalDeployment:
    """All tiers in one process, each partition fed by its own indexer thread."""

    def __init__(self, partitions: Sequence[IndexPartition], n_brokers: int = 1,
                 provider=None, deadline: float | None = 0.5):
        self.partitions = list(partitions)
        self.blender: Blender = build_local_cluster(self.partitions, n_brokers, provider, deadline)
        self.queues = [MessageQueue() for _ in self.partitions]
        self._threads = [threading.Thread(target=st.run, args=(q,), daemon=True,
                                          name=f"indexer-{st.partition_id}")
                         for st, q in zip(self.partitions, self.queues)]
        for t in self._threads:
            t.start()

    def publish(self, msg: UpdateMessage) -> list[Ticket]:
        """Send ``msg`` to every partition's indexer (each keeps what it owns)."""
        return [q.put(msg) for q in self.queues]

    def publish_and_wait(self, msg: UpdateMessage, timeout: float | None = 10.0) -> list:
        return [t.wait(timeout) for t in self.publish(msg)]

    def query(self, request):
        return self.blender.query(request)

    def update_latencies(self) -> list[float]:
        return [x for st in self.partitions for x in st.update_latencies]

    def close(self) -> None:
        for q in self.queues:
            q.close()
        for t in self._threads:
            t.join()
        for st in self.partitions:
            st.close()
        self.blender.close()
        for node, _ in self.blender.brokers:
            node.close()


def run_node(role: str, cfg: Config) -> NodeServer:
    """Start (but do not block on) a node server for ``role``."""
    topo = cfg.topology()
    deadline = cfg["node.deadline"]
    if role == "searcher":
        p = cfg["node.partition"]
        if not 0 <= p < topo.partitions:
            raise ConfigError("node.partition", f"must be in [0, {topo.partitions})")
        listen = cfg["node.listen"] or topo.searchers[p][0]
        state = open_partition(cfg, p)
        searcher = Searcher(state)
        server = NodeServer(parse_address(listen), lambda req: searcher.search(
            req.vector, req.k, req.nprobe), role="searcher")
        server.state = state
        if cfg["data.messages"]:
            stop = threading.Event()
            src = tail_message_log(cfg["data.messages"], follow=True, stop=stop)
            threading.Thread(target=state.run, args=(src,), daemon=True,
                             name=f"indexer-{p}").start()
            server.stop_replay = stop
        return server
    if role == "broker":
        b = cfg["node.broker"]
        if not 0 <= b < len(topo.brokers):
            raise ConfigError("node.broker", f"must be in [0, {len(topo.brokers)})")
        listen = cfg["node.listen"] or topo.brokers[b]
        broker = Broker({p: [RemoteNode(a, deadline) for a in topo.searchers[p]]
                         for p in topo.broker_partitions[b]}, deadline)
        return NodeServer(parse_address(listen), lambda req: broker.search(
            req.vector, req.k, req.nprobe), role="broker")
    if role == "blender":
        listen = cfg["node.listen"] or topo.blenders[0]
        brokers = [(RemoteNode(a, 4 * deadline), parts)
                   for a, parts in zip(topo.brokers, topo.broker_partitions)]
        blender = Blender(brokers, provider=provider_from(cfg), deadline=4 * deadline)
        return NodeServer(parse_address(listen), blender.query, role="blender")
    raise ConfigError("role", f"unknown role {role!r}")
