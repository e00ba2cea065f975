"""Update counters in the shape of the daily operations table, and latency
summaries for benchmark reports."""

from __future__ import annotations

import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

KINDS = ("attribute_update", "image_addition", "image_deletion", "reused_addition")
_ATTR = {"attribute_update": "attribute_updates", "image_addition": "image_additions",
         "image_deletion": "image_deletions", "reused_addition": "reused_additions"}


@dataclass
class UpdateStats:
    attribute_updates: int = 0
    image_additions: int = 0
    image_deletions: int = 0
    reused_additions: int = 0
    hourly: dict[int, Counter] = field(default_factory=lambda: defaultdict(Counter))

    @property
    def total(self) -> int:
        return self.attribute_updates + self.image_additions + self.image_deletions

    def record(self, kind: str, count: int = 1, hour: int | None = None) -> None:
        attr = _ATTR.get(kind)
        if attr is None:
            raise ValueError(f"unknown counter kind {kind!r}")
        if count < 0:
            raise ValueError("counts are non-negative")
        setattr(self, attr, getattr(self, attr) + count)
        if hour is None:
            hour = int(time.time() // 3600) % 24
        self.hourly[hour][kind] += count

    def report_lines(self) -> list[str]:
        lines = [
            f"total\t{self.total}",
            f"attribute_updates\t{self.attribute_updates}",
            f"image_additions\t{self.image_additions}",
            f"image_deletions\t{self.image_deletions}",
            f"reused_additions\t{self.reused_additions}",
        ]
        for hour in sorted(self.hourly):
            c = self.hourly[hour]
            lines.append(f"hour.{hour:02d}\t" + ",".join(f"{k}={c[k]}" for k in KINDS))
        return lines


def aggregate_stats(events: Iterable[tuple[int, str, int]]) -> UpdateStats:
    """Sum ``(hour, kind, count)`` counter events."""
    stats = UpdateStats()
    for hour, kind, count in events:
        stats.record(kind, count, hour)
    return stats


def parse_counter_log(lines: Iterable[str]) -> list[tuple[int, str, int]]:
    """Counter log lines are ``hour<TAB>kind<TAB>count``; ``#`` starts a comment."""
    events = []
    for line_no, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in KINDS:
            raise ValueError(f"line {line_no}: expected hour<TAB>kind<TAB>count")
        try:
            hour, count = int(parts[0]), int(parts[2])
        except ValueError:
            raise ValueError(f"line {line_no}: hour and count must be integers") from None
        events.append((hour, parts[1], count))
    return events


def format_counter_events(events: Iterable[tuple[int, str, int]]) -> str:
    return "".join(f"{h}\t{k}\t{c}\n" for h, k, c in events)


def percentiles_ms(latencies_s, qs=(50, 90, 99)) -> dict[str, float]:
    """Latency percentiles (plus mean and max) in milliseconds."""
    arr = np.asarray(latencies_s, dtype=np.float64) * 1000.0
    if arr.size == 0:
        return {**{f"p{q}": 0.0 for q in qs}, "mean": 0.0, "max": 0.0}
    out = {f"p{q}": float(np.percentile(arr, q, method="higher")) for q in qs}
    out["mean"] = float(arr.mean())
    out["max"] = float(arr.max())
    return out
