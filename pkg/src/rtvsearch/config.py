"""Dotted-key configuration read from an INI-style file.

``[index]`` / ``dim = 64`` becomes the key ``index.dim``.  Command-line
overrides use the same dotted names.  Every key has a typed default; unknown
keys are rejected so typos surface at startup.
"""

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Any, Mapping

from .search import Topology

DEFAULTS: dict[str, Any] = {
    "index.dim": 128,
    "index.n_lists": 0,            # 0 = round(sqrt(dataset size))
    "index.nprobe": 1,
    "index.k": 10,
    "index.list_capacity": 1024,
    "index.seed": 0,
    "index.max_iters": 25,
    "index.feature_seed": 0,
    "topology.partitions": 1,
    "topology.searchers": "127.0.0.1:7101",       # partitions ';', replicas ','
    "topology.brokers": "127.0.0.1:7201",
    "topology.broker_partitions": "0",             # brokers ';', partitions ','
    "topology.blenders": "127.0.0.1:7301",
    "node.listen": "",
    "node.partition": 0,
    "node.broker": 0,
    "node.deadline": 0.5,
    "data.dir": "data",
    "data.messages": "",           # message log tailed by searchers
    "bench.queries": 1000,
    "bench.sigma": 0.05,
    "bench.seed": 0,
    "bench.k": 10,
    "bench.nprobe": 1,
    "bench.reuse_fraction": 0.5,
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {type(default).__name__}, got {raw!r}") from None
    return raw


class Config(dict):
    """Mapping of dotted keys to typed values."""

    def __getitem__(self, key: str) -> Any:
        try:
            return super().__getitem__(key)
        except KeyError:
            raise ConfigError(key, "unknown configuration key") from None

    def topology(self) -> Topology:
        def groups(text: str) -> list[list[str]]:
            return [[x.strip() for x in g.split(",") if x.strip()] for g in text.split(";") if g.strip()]

        try:
            topo = Topology(
                partitions=self["topology.partitions"],
                searchers=groups(self["topology.searchers"]),
                brokers=[b[0] for b in groups(self["topology.brokers"])],
                broker_partitions=[[int(p) for p in g] for g in groups(self["topology.broker_partitions"])],
                blenders=[b[0] for b in groups(self["topology.blenders"])],
            )
            topo.validate()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("topology", str(exc)) from None
        return topo


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
    cfg = Config(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(str(path), f"cannot parse config: {exc}") from None
        for section in parser.sections():
            for name, value in parser.items(section):
                key = f"{section}.{name}"
                if key not in DEFAULTS:
                    raise ConfigError(key, "unknown configuration key")
                cfg[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
        cfg[key] = _coerce(key, value)
    for key in ("index.dim", "index.list_capacity", "index.max_iters", "index.nprobe",
                "index.k", "topology.partitions", "bench.queries"):
        if cfg[key] < 1:
            raise ConfigError(key, "must be positive")
    if cfg["index.n_lists"] < 0:
        raise ConfigError("index.n_lists", "must be non-negative")
    return cfg


def write_config(path: str | Path, values: Mapping[str, Any]) -> None:
    """Write dotted keys back out as an INI file."""
    parser = configparser.ConfigParser(interpolation=None)
    for key, value in values.items():
        section, _, name = key.partition(".")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, str(value))
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
