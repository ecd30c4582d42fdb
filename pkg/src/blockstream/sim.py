"""Trace-driven benchmark harness.

Everything runs on a virtual clock, so the same trace, configuration and
seed always produce the same numbers. Absolute microseconds depend only on
the ``LatencyModel``; compare strategies by ratios and counts.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .client import ClientConfig, ClientRuntime, EventRecord, Page, PageCache, Route, RunReport
from .config import ConfigError
from .latency import LatencyModel
from .model import ActionStore, Trace, TraceEvent
from .provider import ExecutableImage, STRATEGIES
from .server import BlockServer, ServerConfig, VirtualClock


class MetricsError(RuntimeError):
    pass


@dataclass
class RunMetrics:
    strategy: str
    total_blocks: int
    needed: int
    preread: int
    io_count: int
    delivered_blocks: int
    hits: int
    faults: int
    latencies: list[float] = field(repr=False, default_factory=list)
    backing_reads: int = 0
    complete: bool = True

    @property
    def b_per_io(self) -> float:
        return self.delivered_blocks / self.io_count if self.io_count else 0.0

    @property
    def n_t(self) -> float:
        return self.needed / self.total_blocks if self.total_blocks else 0.0

    @property
    def n_p(self) -> float:
        return self.needed / self.preread if self.preread else 0.0

    @property
    def p_t(self) -> float:
        return self.preread / self.total_blocks if self.total_blocks else 0.0

    @property
    def hit_rate(self) -> float:
        return self.hits / self.faults if self.faults else 0.0

    @property
    def mean_us(self) -> float:
        return float(np.mean(self.latencies)) if self.latencies else 0.0

    @property
    def p50_us(self) -> float:
        return float(np.percentile(self.latencies, 50)) if self.latencies else 0.0

    @property
    def p99_us(self) -> float:
        return float(np.percentile(self.latencies, 99)) if self.latencies else 0.0

    def row(self) -> dict:
        return {
            "strategy": self.strategy, "T": self.total_blocks, "N": self.needed, "P": self.preread,
            "io_count": self.io_count, "b_per_io": f"{self.b_per_io:.2f}",
            "n_t": f"{self.n_t:.4f}", "n_p": f"{self.n_p:.4f}", "p_t": f"{self.p_t:.4f}",
            "mean_us": f"{self.mean_us:.3f}", "p50_us": f"{self.p50_us:.3f}", "p99_us": f"{self.p99_us:.3f}",
        }


CSV_COLUMNS = ["strategy", "T", "N", "P", "io_count", "b_per_io", "n_t", "n_p", "p_t",
               "mean_us", "p50_us", "p99_us"]


def metrics_csv(rows: Iterable[RunMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for m in rows:
        writer.writerow(m.row())
    return buf.getvalue()


def table2_metrics(report: RunReport | Sequence[RunReport], total_blocks: int | ExecutableImage,
                   resident_ahead: Iterable[int] = (), strategy: str = "") -> RunMetrics:
    """Need/pre-read/IO accounting for one or more completed replays.

    P counts distinct blocks that reached the client or were made resident
    on the server before anyone asked for them.
    """
    reports = [report] if isinstance(report, RunReport) else list(report)
    if isinstance(total_blocks, ExecutableImage):
        total_blocks = total_blocks.total_blocks
    needed = set()
    delivered = set()
    latencies = []
    io_count = delivered_count = hits = faults = backing = 0
    complete = True
    for r in reports:
        complete &= r.complete
        for rec in r.records:
            needed.add(rec.block)
            faults += 1
            hits += rec.hit
            latencies.append(rec.latency_us)
            backing += rec.backing_reads
            if rec.round_trip:
                io_count += 1
                delivered_count += rec.delivered
        delivered.update(r.delivered)
    if io_count == 0 and any(not rec.hit and rec.route is not Route.LOCAL for r in reports for rec in r.records):
        raise MetricsError("remote misses recorded without any round trip")
    preread = len(delivered | set(resident_ahead))
    return RunMetrics(strategy, total_blocks, len(needed), preread, io_count, delivered_count, hits,
                      faults, latencies, backing, complete)


# -- simulation ---------------------------------------------------------------

@dataclass
class Simulation:
    """Everything produced by ``simulate``: metrics plus the raw pieces."""

    metrics: RunMetrics
    reports: list[RunReport]
    server: BlockServer
    store: ActionStore


def _check_configs(client_config: ClientConfig, server_config: ServerConfig, image: ExecutableImage):
    if client_config.block_size != server_config.block_size:
        raise ConfigError(f"client block_size {client_config.block_size} != server block_size "
                          f"{server_config.block_size}")
    if image.block_size != server_config.block_size:
        raise ConfigError(f"image block_size {image.block_size} != server block_size {server_config.block_size}")
    if server_config.prefetch_strategy not in STRATEGIES:
        raise ConfigError(f"unknown prefetch strategy {server_config.prefetch_strategy!r}")


def image_for(trace: Trace, total_blocks: int | None = None, block_size: int = 4096) -> ExecutableImage:
    needed = max(trace.blocks) + 1
    return ExecutableImage.synthetic(trace.executable, max(total_blocks or 0, needed), block_size)


def simulate(trace: Trace, client_config: ClientConfig | None = None, server_config: ServerConfig | None = None,
             model: LatencyModel | None = None, *, image: ExecutableImage | None = None,
             store: ActionStore | None = None, warm: bool = True, runs: int = 1,
             total_blocks: int | None = None) -> Simulation:
    """Replay ``trace`` against an in-process server.

    With ``warm=True`` and no stored action for the trace's executable, a
    construction run is made first and discarded; the server is then
    restarted from the resulting store, so measured runs start with a cold
    server memory cache apart from the strategy's own preloading. Each
    measured run uses a fresh client (cold page cache, new token).
    """
    client_config = client_config or ClientConfig(threaded=False)
    server_config = server_config or ServerConfig(block_size=client_config.block_size)
    model = model or LatencyModel()
    image = image or image_for(trace, total_blocks, server_config.block_size)
    _check_configs(client_config, server_config, image)
    store = store if store is not None else ActionStore(seg_max=server_config.seg_max)

    if warm and not store.for_executable(trace.executable):
        build = BlockServer({image.name: image.cold_copy()}, store,
                            replace(server_config, prefetch_strategy="none"), clock=VirtualClock())
        with ClientRuntime(client_config, server=build, model=replace(model, loss_rate=0.0),
                           pool_background=False) as rt:
            rt.run(trace)
        build.shutdown()
        store = build.store

    live = image.cold_copy()
    server = BlockServer({live.name: live}, store, server_config, clock=VirtualClock())
    ahead = set(live.ahead)
    reports = []
    loss = model.loss_process()
    for n in range(runs):
        with ClientRuntime(client_config, server=server, model=model, pool_background=False) as rt:
            reports.append(rt.run(trace, loss=loss))
        ahead |= live.ahead
    server.shutdown()
    metrics = table2_metrics(reports, live, ahead, server_config.prefetch_strategy)
    return Simulation(metrics, reports, server, server.store)


def simulate_run(trace: Trace, client_config: ClientConfig | None = None,
                 server_config: ServerConfig | None = None, model: LatencyModel | None = None,
                 **kw) -> RunMetrics:
    return simulate(trace, client_config, server_config, model, **kw).metrics


def baseline_readahead(trace: Trace, model: LatencyModel | None = None, window_max: int = 32, *,
                       total_blocks: int | None = None, cache_pages: int = 65536,
                       window_min: int = 4) -> RunMetrics:
    """Sequential-window readahead client against a server without prediction.

    A miss at block ``b`` fetches ``[b, b + w)``. The window starts at
    ``window_min`` and doubles up to ``window_max`` while each miss lands
    exactly where the previous fetch ended; any other miss resets it.
    Every fetched block is read from backing storage.
    """
    model = model or LatencyModel()
    loss = model.loss_process()
    limit = total_blocks if total_blocks is not None else max(trace.blocks) + 1
    cache = PageCache(cache_pages)
    report = RunReport(trace.executable)
    window = 0
    last_end = None
    for seq, event in enumerate(trace.events):
        key = (trace.executable, event.block)
        if cache.lookup(key) is not None:
            report.records.append(EventRecord(seq, event.block, True, False, model.hit_us))
            continue
        if last_end is not None and event.block == last_end and window:
            window = min(window * 2, window_max)
        else:
            window = window_min
        end = max(min(event.block + window, limit), event.block + 1)
        fetched = list(range(event.block, end))
        for b in fetched:
            cache.insert((trace.executable, b), Page(b, b""))
        report.delivered.extend(fetched)
        latency, lost = model.round_trip_us(len(fetched), ["backing"] * len(fetched), loss)
        report.records.append(EventRecord(seq, event.block, False, True, latency, len(fetched),
                                          backing_reads=len(fetched), lost=lost))
        report.round_trips += 1
        last_end = end
    return table2_metrics(report, limit, strategy="readahead")


# -- synthetic traces ---------------------------------------------------------

JUMP_MODELS = ("sequential", "strided", "clustered_jumps")


@dataclass(frozen=True)
class SyntheticTraceSpec:
    total_blocks: int
    needed_fraction: float
    jump_model: str = "clustered_jumps"
    jump_param: float = 0.2  # stride for strided, jump probability for clustered_jumps
    seed: int = 0
    executable: str = "app"
    revisit_rate: float = 0.0

    @property
    def needed(self) -> int:
        return int(round(self.total_blocks * self.needed_fraction))


TABLE2 = {
    "jvm": (2803, 1651),
    "python": (1149, 519),
    "perl": (782, 408),
    "gcc": (269, 97),
    "openssl": (131, 63),
}


def named_spec(name: str, seed: int = 0) -> SyntheticTraceSpec:
    try:
        total, needed = TABLE2[name]
    except KeyError:
        raise ConfigError(f"unknown trace spec {name!r}; choose from {', '.join(TABLE2)}") from None
    return SyntheticTraceSpec(total, needed / total, "clustered_jumps", 0.2, seed, name, revisit_rate=0.3)


def generate_trace(spec: SyntheticTraceSpec) -> Trace:
    if not 0 < spec.needed_fraction <= 1:
        raise ConfigError("needed_fraction must be in (0, 1]")
    if spec.total_blocks < 1:
        raise ConfigError("total_blocks must be positive")
    if spec.jump_model not in JUMP_MODELS:
        raise ConfigError(f"unknown jump model {spec.jump_model!r}")
    n = spec.needed
    if n < 1:
        raise ConfigError("spec selects no blocks")
    rng = random.Random(spec.seed)

    if spec.jump_model == "sequential":
        order = list(range(n))
    elif spec.jump_model == "strided":
        stride = int(spec.jump_param)
        if stride < 1:
            raise ConfigError("stride must be at least 1")
        order = [b for off in range(stride) for b in range(off, spec.total_blocks, stride)][:n]
    else:
        p = spec.jump_param
        if not 0 <= p <= 1:
            raise ConfigError("jump probability must be in [0, 1]")
        chosen = sorted(rng.sample(range(spec.total_blocks), n))
        unvisited = set(range(n))
        order = []
        pos = 0
        while True:
            order.append(chosen[pos])
            unvisited.discard(pos)
            if not unvisited:
                break
            if rng.random() >= p and pos + 1 in unvisited:
                pos += 1
            else:
                pos = rng.choice(sorted(unvisited))

    blocks = []
    for i, b in enumerate(order):
        blocks.append(b)
        if spec.revisit_rate and i and rng.random() < spec.revisit_rate:
            blocks.append(order[rng.randrange(i)])
    return Trace(spec.executable, tuple(TraceEvent(b) for b in blocks))


# -- strategy comparison ----------------------------------------------------------

def compare_strategies(trace: Trace, model: LatencyModel | None = None, *, total_blocks: int | None = None,
                       server_config: ServerConfig | None = None, client_config: ClientConfig | None = None,
                       window_max: int = 32) -> list[RunMetrics]:
    """Run every prefetch strategy and the readahead baseline on one trace."""
    model = model or LatencyModel()
    server_config = server_config or ServerConfig()
    image = image_for(trace, total_blocks, server_config.block_size)
    rows = []
    for strategy in ("none", "full", "norm_var", "nv_async"):
        cfg = replace(server_config, prefetch_strategy=strategy)
        rows.append(simulate_run(trace, client_config, cfg, model, image=image))
    rows.append(baseline_readahead(trace, model, window_max, total_blocks=image.total_blocks))
    return rows


def round_trip_formula(needed: int, seg_max: int = 32) -> int:
    """Round trips for a stable replay: two for the first segment, one per later segment."""
    segments = math.ceil(needed / seg_max)
    return 2 + (segments - 1) if needed > 2 else 1
