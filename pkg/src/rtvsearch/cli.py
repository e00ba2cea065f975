"""Command-line entry point.

Subcommands: serve, load, query, bench, stats. Any config key can be
overridden with ``--<section>.<name> <value>`` (e.g. ``--index.dim 64``).
Reports are printed as ``key<TAB>value`` lines.
"""

from __future__ import annotations

import argparse
import gc
import logging
import signal
import sys
import threading

import numpy as np

from .bench import MixedUpdateStream, UpdateFeeder, make_query_set, run_bench
from .config import Config, ConfigError, load_config
from .messages import format_message
from .search import QueryRequest, RankWeights
from .service import LocalDeployment, load_index, open_partitions, provider_from, run_node
from .stats import aggregate_stats, parse_counter_log
from .wire import RemoteNode

logger = logging.getLogger("rtvsearch")


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg:
            raise SystemExit(f"unrecognized argument: {arg}")
        key, eq, value = arg[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise SystemExit(f"missing value for {arg}")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def _print(lines) -> None:
    for line in lines:
        print(line)


def _result_lines(result) -> list[str]:
    lines = [f"count\t{len(result.hits)}"]
    for rank_no, h in enumerate(result.hits, 1):
        a = h.attributes
        lines.append(f"hit.{rank_no}\turl={a.url},distance={h.distance:.6f},score={h.score:.6f},"
                     f"product_id={a.product_id},sales={a.sales},praise={a.praise},price={a.price},"
                     f"partition={h.partition_id},image_index={h.image_index}")
    if result.missing:
        lines.append("degraded\t" + ",".join(map(str, result.missing)))
    return lines


def cmd_serve(args, cfg: Config) -> int:
    server = run_node(args.role, cfg)
    # the loaded index is long lived; keep it out of full collections
    gc.freeze()
    print(f"listening\t{server.address}", flush=True)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    server.start()
    try:
        done.wait()
    except KeyboardInterrupt:
        pass
    server.stop()
    return 0


def cmd_load(args, cfg: Config) -> int:
    summary = load_index(cfg, args.log, strict=args.strict)
    _print(summary.lines())
    return 0


def _weights(text: str | None) -> RankWeights:
    if not text:
        return RankWeights()
    return RankWeights(*(float(x) for x in text.split(",")))


def cmd_query(args, cfg: Config) -> int:
    if (args.url is None) == (args.vector is None):
        raise SystemExit("give exactly one of --url and --vector")
    vector = None if args.vector is None else np.array(
        [float(x) for x in args.vector.split(",")], dtype=np.float32)
    req = QueryRequest(vector=vector, url=args.url, k=args.k or cfg["index.k"],
                       nprobe=args.nprobe or cfg["index.nprobe"], weights=_weights(args.weights))
    if args.local:
        dep = LocalDeployment(open_partitions(cfg), len(cfg.topology().brokers), provider_from(cfg))
        try:
            result = dep.query(req)
        finally:
            dep.close()
    else:
        result = RemoteNode(cfg.topology().blenders[0], timeout=10.0).query(req)
    _print(_result_lines(result))
    return 0


def cmd_bench(args, cfg: Config) -> int:
    parts = open_partitions(cfg)
    vectors = np.concatenate([p.vectors.rows(p.valid_indexes()) for p in parts])
    queries, _ = make_query_set(vectors, cfg["bench.queries"], cfg["bench.sigma"], cfg["bench.seed"])
    live: dict[int, list[str]] = {}
    for st in parts:
        for pid, rec in st.registry.products.items():
            if rec.available:
                live.setdefault(pid, []).extend(st.forward.url(i) for i in rec.images)
    k, nprobe = cfg["bench.k"], cfg["bench.nprobe"]
    dep = None
    if args.local:
        dep = LocalDeployment(parts, len(cfg.topology().brokers), provider_from(cfg))
        query_fn, publish, lat = dep.query, dep.publish, dep.update_latencies
    else:
        for st in parts:
            st.close()
        client = RemoteNode(cfg.topology().blenders[0], timeout=10.0)
        query_fn, lat = client.query, None
        publish = None
        if args.update_rate:
            if not cfg["data.messages"]:
                raise ConfigError("data.messages", "remote update stream needs a message log path")
            fh = open(cfg["data.messages"], "a", encoding="utf-8", buffering=1)
            publish = lambda m: fh.write(format_message(m) + "\n")  # noqa: E731
    feeder = None
    if args.update_rate:
        if not live:
            raise SystemExit("update stream needs at least one live product")
        stream = MixedUpdateStream(live, seed=cfg["bench.seed"],
                                   reuse_fraction=cfg["bench.reuse_fraction"])
        feeder = UpdateFeeder(stream, publish, args.update_rate)
    try:
        report = run_bench(query_fn, queries, args.users, args.seconds, k=k, nprobe=nprobe,
                           max_queries=args.max_queries, feeder=feeder, warmup=args.warmup,
                           update_latencies=lat)
    finally:
        if dep is not None:
            dep.close()
    _print(report.lines())
    return 0


def cmd_stats(args, cfg: Config) -> int:
    with open(args.log, encoding="utf-8") as fh:
        stats = aggregate_stats(parse_counter_log(fh))
    _print(stats.report_lines())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtvsearch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run a searcher, broker or blender node")
    p.add_argument("--role", required=True, choices=("searcher", "broker", "blender"))
    p.add_argument("--config")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("load", help="full indexing from a message log")
    p.add_argument("--config")
    p.add_argument("--log", required=True)
    p.add_argument("--strict", action="store_true", help="fail on the first malformed line")
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("query", help="issue one query")
    p.add_argument("--config")
    p.add_argument("--url")
    p.add_argument("--vector", help="comma-separated components")
    p.add_argument("--k", type=int)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--weights", help="w_sim,w_sales,w_praise,w_price")
    p.add_argument("--local", action="store_true", help="query the snapshots in-process")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="concurrent query benchmark")
    p.add_argument("--config")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--seconds", type=float)
    p.add_argument("--max-queries", type=int)
    p.add_argument("--update-rate", type=float, default=0.0, help="messages per second")
    p.add_argument("--warmup", type=float, default=0.0)
    p.add_argument("--local", action="store_true", help="run every tier in-process")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="aggregate an update counter log")
    p.add_argument("--log", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None), _split_overrides(extra))
        if args.command == "bench" and args.seconds is None and args.max_queries is None:
            raise SystemExit("bench needs --seconds or --max-queries")
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error\tconfig {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error\t{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
