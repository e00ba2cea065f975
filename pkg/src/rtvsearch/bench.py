"""Concurrent query load generator with an optional paced update stream."""

from __future__ import annotations

import logging
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .core import UpdateMessage
from .search import PartialResult, QueryRequest
from .stats import percentiles_ms

logger = logging.getLogger(__name__)

# share of attribute updates / additions / removals in the update stream
UPDATE_MIX = (0.32, 0.54, 0.14)


@dataclass
class BenchReport:
    duration: float
    issued: int
    succeeded: int
    throughput: float
    latency_ms: dict[str, float]
    degraded: int = 0
    update_sent: int = 0
    update_throughput: float = 0.0
    update_latency_ms: dict[str, float] | None = None
    request_log: list[tuple[int, int, int]] = field(default_factory=list, repr=False)

    def lines(self) -> list[str]:
        out = [
            f"duration_s\t{self.duration:.3f}",
            f"queries_issued\t{self.issued}",
            f"queries_succeeded\t{self.succeeded}",
            f"throughput_qps\t{self.throughput:.2f}",
        ]
        out += [f"latency_{k}_ms\t{self.latency_ms[k]:.3f}" for k in ("mean", "p50", "p90", "p99", "max")]
        out.append(f"degraded\t{self.degraded}")
        if self.update_sent:
            out.append(f"updates_sent\t{self.update_sent}")
            out.append(f"update_throughput_mps\t{self.update_throughput:.2f}")
            if self.update_latency_ms:
                out += [f"update_latency_{k}_ms\t{self.update_latency_ms[k]:.3f}"
                        for k in ("p50", "p90", "p99")]
        return out


def make_query_set(vectors: np.ndarray, n_queries: int, sigma: float = 0.05,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Indexed vectors perturbed by Gaussian noise; returns (queries, source rows)."""
    if len(vectors) == 0:
        raise ValueError("need at least one indexed vector to draw queries from")
    rng = np.random.default_rng(seed)
    src = rng.integers(0, len(vectors), size=n_queries)
    noise = rng.normal(0.0, sigma, size=(n_queries, vectors.shape[1]))
    return (vectors[src] + noise).astype(np.float32), src


class MixedUpdateStream:
    """Endless, seeded stream of product events.

    ``live`` maps product id to its urls for products currently indexed.
    Additions re-list a removed product with probability ``reuse_fraction``
    (when one exists), otherwise they introduce a new product.
    """

    def __init__(self, live: dict[int, Sequence[str]], seed: int = 0,
                 mix: Sequence[float] = UPDATE_MIX, reuse_fraction: float = 0.5,
                 first_new_id: int | None = None, url_prefix: str = "http://img.bench/"):
        if not live:
            raise ValueError("the update stream needs at least one live product")
        self.rng = random.Random(seed)
        total = float(sum(mix))
        self.mix = [m / total for m in mix]
        self.reuse_fraction = reuse_fraction
        self.live = {p: tuple(u) for p, u in live.items()}
        self._live_ids = list(self.live)
        self._pos = {p: i for i, p in enumerate(self._live_ids)}
        self.removed: dict[int, tuple[str, ...]] = {}
        self.next_id = first_new_id or (max(self.live) + 1)
        self.url_prefix = url_prefix

    def _take_live(self, pid: int) -> None:
        i = self._pos.pop(pid)
        last = self._live_ids.pop()
        if last != pid:
            self._live_ids[i] = last
            self._pos[last] = i
        del self.live[pid]

    def _put_live(self, pid: int, urls: tuple[str, ...]) -> None:
        self.live[pid] = urls
        self._pos[pid] = len(self._live_ids)
        self._live_ids.append(pid)

    def __iter__(self) -> Iterator[UpdateMessage]:
        return self

    def __next__(self) -> UpdateMessage:
        rng = self.rng
        r = rng.random()
        attrs = {k: rng.randrange(10_000) for k in ("sales", "praise", "price")}
        if r < self.mix[0] and self._live_ids:
            pid = self._live_ids[rng.randrange(len(self._live_ids))]
            field_name = ("sales", "praise", "price")[rng.randrange(3)]
            return UpdateMessage.update(pid, **{field_name: attrs[field_name]})
        if r < self.mix[0] + self.mix[1] or len(self._live_ids) < 2:
            if self.removed and rng.random() < self.reuse_fraction:
                pid = next(iter(self.removed))
                urls = self.removed.pop(pid)
            else:
                pid = self.next_id
                self.next_id += 1
                urls = (f"{self.url_prefix}{pid}.jpg",)
            self._put_live(pid, urls)
            return UpdateMessage.add(pid, urls, **attrs)
        pid = self._live_ids[rng.randrange(len(self._live_ids))]
        self.removed[pid] = self.live[pid]
        self._take_live(pid)
        return UpdateMessage.remove(pid)


class UpdateFeeder(threading.Thread):
    """Publishes messages at a fixed rate (schedule-based pacing).

    The thread wakes at most once per ``tick`` seconds and publishes every
    message that has come due, which keeps wakeups (and the context switches
    they cost the query threads) independent of the rate.
    """

    def __init__(self, stream: Iterator[UpdateMessage], publish: Callable[[UpdateMessage], object],
                 rate: float, tick: float = 0.005):
        super().__init__(name="update-feeder", daemon=True)
        if rate <= 0:
            raise ValueError("update rate must be positive")
        self.stream = stream
        self.publish = publish
        self.rate = rate
        self.tick = tick
        self.sent = 0
        self._halt = threading.Event()

    def run(self) -> None:
        interval = 1.0 / self.rate
        start = time.perf_counter()
        while not self._halt.is_set():
            scheduled = start + self.sent * interval
            delay = scheduled - time.perf_counter()
            if delay > 0:
                self._halt.wait(max(delay, self.tick))
                continue
            self.publish(next(self.stream))
            self.sent += 1

    def stop(self) -> None:
        self._halt.set()
        self.join()


QueryFn = Callable[[QueryRequest], PartialResult]


def run_bench(query: QueryFn, queries: np.ndarray, users: int, duration: float | None,
              k: int = 10, nprobe: int = 1, max_queries: int | None = None,
              feeder: UpdateFeeder | None = None, warmup: float = 0.0,
              update_latencies: Callable[[], Sequence[float]] | None = None,
              keep_log: bool = False) -> BenchReport:
    """Drive ``users`` concurrent query loops.

    User ``u`` issues query rows ``u, u+U, u+2U, ...`` (mod the set size), so
    the issued sequence depends only on the query set.  Stops after
    ``duration`` seconds or once ``max_queries`` have been issued in total.
    ``warmup`` seconds of traffic are run first and not measured.
    """
    if users < 1:
        raise ValueError("users must be positive")
    if duration is None and max_queries is None:
        raise ValueError("need a duration or a query budget")
    n_q = len(queries)
    lock = threading.Lock()
    budget = [max_queries if max_queries is not None else -1]
    latencies: list[list[float]] = [[] for _ in range(users)]
    succeeded = [0] * users
    degraded = [0] * users
    issued = [0] * users
    log: list[tuple[int, int, int]] = []
    stop = threading.Event()
    measuring = threading.Event()

    def take() -> bool:
        with lock:
            if budget[0] == 0:
                return False
            if budget[0] > 0:
                budget[0] -= 1
            return True

    def loop(u: int) -> None:
        j = 0
        while not stop.is_set():
            if measuring.is_set() and not take():
                return
            row = (u + j * users) % n_q
            req = QueryRequest(vector=queries[row], k=k, nprobe=nprobe)
            t0 = time.perf_counter()
            try:
                res = query(req)
                ok = True
            except Exception as exc:
                logger.debug("query failed: %s", exc)
                ok = False
            t1 = time.perf_counter()
            if measuring.is_set():
                issued[u] += 1
                if ok:
                    succeeded[u] += 1
                    latencies[u].append(t1 - t0)
                    degraded[u] += res.degraded
                if keep_log:
                    with lock:
                        log.append((u, j, row))
            j += 1

    if warmup <= 0:
        measuring.set()
    threads = [threading.Thread(target=loop, args=(u,), daemon=True) for u in range(users)]
    for t in threads:
        t.start()
    if warmup > 0:
        time.sleep(warmup)
        measuring.set()
    lat_mark = len(update_latencies()) if update_latencies else 0
    if feeder is not None:
        feeder.start()
    t_start = time.perf_counter()
    if duration is not None:
        deadline = t_start + duration
        while time.perf_counter() < deadline and any(t.is_alive() for t in threads):
            time.sleep(0.01)
        stop.set()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t_start
    if feeder is not None:
        feeder.stop()
    all_lat = [x for per in latencies for x in per]
    report = BenchReport(
        duration=elapsed,
        issued=sum(issued),
        succeeded=sum(succeeded),
        throughput=sum(succeeded) / elapsed if elapsed > 0 else 0.0,
        latency_ms=percentiles_ms(all_lat),
        degraded=sum(degraded),
        request_log=sorted(log),
    )
    if feeder is not None:
        report.update_sent = feeder.sent
        report.update_throughput = feeder.sent / elapsed if elapsed > 0 else 0.0
        if update_latencies is not None:
            report.update_latency_ms = percentiles_ms(list(update_latencies())[lat_mark:])
    return report
