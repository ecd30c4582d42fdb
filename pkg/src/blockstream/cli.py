"""Command-line entry points.

Exit codes: 0 success, 2 usage or configuration problems, 3 transport
failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import tempfile
import threading
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .client import ClientRuntime, TransportError
from .config import CommandConfig, ConfigError, setup_logging
from .model import (ActionKind, ActionStore, StoreFormatError, TraceParseError, dumps_actions,
                    read_store, read_trace)
from .predictor import PredictorConfig, build_actions
from .provider import load_images, segment_variance
from .server import BlockServer, TCPBlockServer, WallClock, parse_addr
from .sim import compare_strategies, generate_trace, metrics_csv, named_spec

log = logging.getLogger("blockstream.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRANSPORT = 3


class UsageError(Exception):
    pass


def write_store_atomic(store: ActionStore, path) -> None:
    """Write to a temp file in the same directory, fsync, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(dumps_actions(store))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt4(x: float) -> str:
    return str(Decimal(repr(x)).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP))


def describe_store(store: ActionStore, estimator: str = "mean") -> list[str]:
    lines = []
    for a in store:
        segs = ",".join(str(len(s)) for s in a.segments)
        var = ",".join(_fmt4(segment_variance(s, estimator)) for s in a.segments)
        lines.append(f"{a.executable} {a.kind.label} id={a.id} segs=[{segs}] var=[{var}]")
    if not lines:
        lines.append("0 actions")
    return lines


# -- subcommands ----------------------------------------------------------------

def cmd_serve(args, cfg: CommandConfig) -> int:
    cfg.set_default("image_dir", args.images)
    cfg.set_default("action_store", args.store)
    cfg.set_default("listen_addr", args.listen)
    try:
        host, port = parse_addr(cfg.get("listen_addr", "127.0.0.1:7420"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    server_config = cfg.server_config()
    image_dir = cfg.get("image_dir")
    if image_dir is None or not Path(image_dir).is_dir():
        raise UsageError(f"image directory {image_dir!r} is not readable")
    try:
        images = load_images(image_dir, server_config.block_size)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load images: {exc}") from None
    store_path = cfg.get("action_store")
    store = ActionStore(seg_max=server_config.seg_max)
    if store_path and Path(store_path).exists():
        try:
            store = read_store(store_path)
        except StoreFormatError as exc:
            raise UsageError(f"cannot load action store {store_path}: {exc}") from None

    block_server = BlockServer(images, store, server_config, clock=WallClock(), background_prefetch=True)
    try:
        tcp = TCPBlockServer((host, port), block_server)
    except OSError as exc:
        block_server.shutdown()
        raise UsageError(f"cannot listen on {host}:{port}: {exc}") from None
    bound_host, bound_port = tcp.server_address[:2]
    log.info("listening addr=%s:%d images=%d actions=%d strategy=%s", bound_host, bound_port,
             len(images), len(store), server_config.prefetch_strategy)

    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    worker = threading.Thread(target=tcp.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
    worker.start()
    stop.wait()
    tcp.shutdown()
    tcp.server_close()
    for line in block_server.predictor.describe_sessions():
        log.info("open session %s", line)
    block_server.shutdown()
    if store_path:
        write_store_atomic(block_server.store, store_path)
        log.info("saved action store path=%s actions=%d", store_path, len(block_server.store))
    return EXIT_OK


def cmd_replay(args, cfg: CommandConfig) -> int:
    cfg.set_default("server_addr", args.server)
    try:
        trace = read_trace(args.trace)
    except (OSError, TraceParseError) as exc:
        raise UsageError(str(exc)) from None
    client_config = cfg.client_config()
    model = cfg.latency_model() if cfg.get("clock", "virtual") == "virtual" else None
    try:
        with ClientRuntime(client_config, model=model) as runtime:
            report = runtime.run(trace)
    except TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = sys.stdout
    out.write(report.to_csv())
    delivered = sum(r.delivered for r in report.records)
    b_per_io = delivered / report.round_trips if report.round_trips else 0.0
    mean = sum(report.latencies) / len(report.latencies) if report.records else 0.0
    out.write(f"# summary executable={trace.executable} faults={len(report.records)} hits={report.hits} "
              f"round_trips={report.round_trips} delivered={delivered} b_per_io={b_per_io:.2f} "
              f"mean_us={mean:.1f} complete={int(report.complete)}\n")
    if not report.complete:
        print(f"error: {report.error}", file=sys.stderr)
        return EXIT_TRANSPORT
    return EXIT_OK


def cmd_bench(args, cfg: CommandConfig) -> int:
    if (args.spec is None) == (args.trace is None):
        raise UsageError("give exactly one of --spec or --trace")
    model = cfg.latency_model()
    total = args.total_blocks
    try:
        if args.spec is not None:
            spec = named_spec(args.spec, seed=model.seed)
            trace = generate_trace(spec)
            total = total or spec.total_blocks
        else:
            trace = read_trace(args.trace)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    rows = compare_strategies(trace, model, total_blocks=total, server_config=cfg.server_config(),
                              client_config=None)
    text = metrics_csv(rows)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "compare.csv").write_text(text)
        log.info("wrote comparison path=%s rows=%d", out_dir / "compare.csv", len(rows))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_actions(args, cfg: CommandConfig) -> int:
    server_config = cfg.server_config()
    if args.action_cmd == "inspect":
        try:
            store = read_store(args.store)
        except StoreFormatError as exc:
            print(f"error: corrupt action store {args.store}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except OSError as exc:
            raise UsageError(str(exc)) from None
        for line in describe_store(store, server_config.variance_estimator):
            print(line)
        return EXIT_OK
    # build
    store = ActionStore(seg_max=server_config.seg_max)
    if Path(args.out).exists():
        try:
            store = read_store(args.out)
        except StoreFormatError as exc:
            print(f"error: corrupt action store {args.out}: {exc}", file=sys.stderr)
            return EXIT_USAGE
    try:
        traces = [read_trace(p) for p in args.traces]
    except (OSError, TraceParseError) as exc:
        raise UsageError(str(exc)) from None
    pconf = PredictorConfig(seg_max=store.seg_max, default_kind=ActionKind.parse(args.kind))
    store = build_actions([(t.executable, t.distinct_blocks()) for t in traces], pconf, store)
    write_store_atomic(store, args.out)
    for line in describe_store(store, server_config.variance_estimator):
        print(line)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--log-level", default=None, help="debug, info, warning, error")

    parser = argparse.ArgumentParser(prog="blockstream", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", parents=[common], help="run the block server")
    p.add_argument("--images", help="directory of <name>.img files")
    p.add_argument("--store", help="action store path (created on shutdown if missing)")
    p.add_argument("--listen", help="host:port to bind")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", parents=[common], help="replay a trace against a server")
    p.add_argument("trace")
    p.add_argument("--server", help="host:port of the block server")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("bench", parents=[common], help="compare prefetch strategies in simulation")
    p.add_argument("--spec", help="named synthetic trace: jvm, python, perl, gcc, openssl")
    p.add_argument("--trace", help="trace file")
    p.add_argument("--total-blocks", type=int, help="image size in blocks")
    p.add_argument("--out", help="directory for compare.csv (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("actions", parents=[common], help="inspect or build action stores")
    asub = p.add_subparsers(dest="action_cmd", required=True)
    a = asub.add_parser("inspect", parents=[common], help="print one line per stored action")
    a.add_argument("store")
    a = asub.add_parser("build", parents=[common], help="construct actions from trace files")
    a.add_argument("--out", required=True, help="store to create or extend")
    a.add_argument("--kind", default="workload", choices=[k.label for k in ActionKind])
    a.add_argument("traces", nargs="+")
    p.set_defaults(func=cmd_actions)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = CommandConfig.load(args.config, args.overrides)
        setup_logging(args.log_level or cfg.get("log_level", "info"))
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
