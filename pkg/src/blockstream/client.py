"""Client runtime: replays a page-fault trace through the redirect path.

The pipeline mirrors a kernel-side client. A fault first checks the page
cache. On a miss the redirector decides whether the executable is served
remotely; remote requests go through a metadata ring to a networker worker
that owns a persistent connection. Every block in the response is copied
into pages taken from the page pool and inserted into the LRU page cache.
"""

from __future__ import annotations

import enum
import logging
import queue
import socket
import threading
import time
import uuid
from collections import OrderedDict
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import wire
from .latency import LatencyModel, LossProcess
from .model import Trace
from .wire import RequestFrame, ResponseFrame, Status

log = logging.getLogger("blockstream.client")


class Route(enum.Enum):
    LOCAL = "local"
    REMOTE = "remote"


class RedirectSet:
    """Executable names whose IO is redirected to the server."""

    def __init__(self, names: Iterable[str] = ()):
        self.names = frozenset(names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __len__(self):
        return len(self.names)


def redirect(request: tuple[str, int], names: RedirectSet) -> Route:
    executable, _block = request
    return Route.REMOTE if executable in names else Route.LOCAL


# -- page pool --------------------------------------------------------------

class PoolError(ValueError):
    pass


class PagePool:
    """Fixed-size pool of free page handles refilled by an allocator thread.

    ``acquire`` hands out a whole batch or waits; it never returns a
    partial batch. With ``background=False`` the refill happens inline
    when a batch cannot be served.
    """

    def __init__(self, capacity: int = 256, *, background: bool = True):
        if capacity < 1:
            raise ValueError("pool capacity must be positive")
        self.capacity = capacity
        self.background = background
        self._cond = threading.Condition()
        self._next = 0
        self._free: list[int] = []
        self.allocated = 0  # pages requested from the "kernel"
        self.released = 0
        self._closed = False
        self._refill_locked()
        self._thread = None
        if background:
            self._thread = threading.Thread(target=self._allocator, name="allocator", daemon=True)
            self._thread.start()

    @property
    def free(self) -> int:
        return len(self._free)

    def _refill_locked(self):
        while len(self._free) < self.capacity:
            self._free.append(self._next)
            self._next += 1
            self.allocated += 1

    def _allocator(self):
        with self._cond:
            while not self._closed:
                if len(self._free) < self.capacity:
                    self._refill_locked()
                    self._cond.notify_all()
                self._cond.wait()

    def acquire(self, n: int) -> list[int]:
        if n < 1:
            raise ValueError("must acquire at least one page")
        if n > self.capacity:
            raise PoolError("burst exceeds pool capacity")
        with self._cond:
            while len(self._free) < n:
                if self._closed:
                    raise PoolError("pool closed")
                if not self.background:
                    self._refill_locked()
                    break
                self._cond.notify_all()
                self._cond.wait(timeout=1.0)
            batch = self._free[:n]
            del self._free[:n]
            if self.background:
                self._cond.notify_all()
            return batch

    def release(self, handles: Iterable[int]):
        # evicted pages go back to the kernel, not to the pool
        self.released += sum(1 for _ in handles)

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=5)


# -- page cache --------------------------------------------------------------

@dataclass
class Page:
    handle: int
    data: bytes


class PageCache:
    """LRU cache keyed by (executable, block index)."""

    def __init__(self, capacity_pages: int, on_evict: Callable[[list[Page]], None] | None = None):
        if capacity_pages < 1:
            raise ValueError("cache capacity must be positive")
        self.capacity_pages = capacity_pages
        self.entries: OrderedDict[tuple[str, int], Page] = OrderedDict()
        self.on_evict = on_evict
        self.evictions = 0

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, key) -> Page | None:
        page = self.entries.get(key)
        if page is not None:
            self.entries.move_to_end(key)
        return page

    def insert(self, key, page: Page) -> list[Page]:
        evicted = []
        old = self.entries.pop(key, None)
        if old is not None:
            evicted.append(old)
        self.entries[key] = page
        while len(self.entries) > self.capacity_pages:
            _, victim = self.entries.popitem(last=False)
            evicted.append(victim)
        self.evictions += len(evicted)
        if evicted and self.on_evict is not None:
            self.on_evict(evicted)
        return evicted


# -- metadata ring -----------------------------------------------------------

class RingFull(RuntimeError):
    pass


class MetadataRing:
    """Bounded FIFO between the redirector and one networker worker."""

    def __init__(self, capacity: int = 64, *, block_when_full: bool = True):
        self.capacity = capacity
        self.block_when_full = block_when_full
        self._q: queue.Queue = queue.Queue(maxsize=capacity)

    def put(self, item, timeout: float | None = None):
        try:
            if self.block_when_full:
                self._q.put(item, timeout=timeout)
            else:
                self._q.put_nowait(item)
        except queue.Full:
            raise RingFull(f"metadata ring full ({self.capacity} slots)") from None

    def get(self, timeout: float | None = None):
        return self._q.get(timeout=timeout)

    def get_nowait(self):
        return self._q.get_nowait()

    def __len__(self) -> int:
        return self._q.qsize()


# -- transports --------------------------------------------------------------

class TransportError(ConnectionError):
    pass


class RemoteError(RuntimeError):
    def __init__(self, status: Status, frame: RequestFrame):
        self.status = status
        self.frame = frame
        super().__init__(f"server answered {status.name.lower()} for {frame.executable}:{frame.block}")


@dataclass(frozen=True)
class Exchange:
    response: ResponseFrame
    sources: tuple[str, ...] | None
    wall_us: float


class LoopbackConnection:
    """In-process connection that still goes through the byte codec."""

    def __init__(self, server, block_size: int | None = None):
        self.server = server
        self.block_size = block_size or server.config.block_size
        self.closed = False

    def request(self, frame: RequestFrame) -> tuple[ResponseFrame, tuple[str, ...] | None]:
        if self.closed:
            raise ConnectionError("connection closed")
        served = self.server.handle(wire.decode_request(wire.encode_request(frame)))
        data = wire.encode_response(served.frame, self.server.config.block_size)
        return wire.decode_response(data, self.block_size), served.sources

    def close(self):
        self.closed = True


class TcpConnection:
    def __init__(self, addr: tuple[str, int], block_size: int = 4096, timeout: float = 10.0):
        self.block_size = block_size
        self.sock = socket.create_connection(addr, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def request(self, frame: RequestFrame) -> tuple[ResponseFrame, None]:
        self.sock.sendall(wire.encode_request(frame))
        return wire.read_response(self.sock.recv, self.block_size), None

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


_TRANSPORT_ERRORS = (OSError, EOFError, wire.ProtocolError)


class Networker:
    """Per-worker threads, each owning one persistent connection and ring.

    ``threaded=False`` services each ring on the submitting thread right
    after the put; the simulator uses it to avoid thread handoffs.
    """

    def __init__(self, connect: Callable[[], object], workers: int = 1, *, ring_capacity: int = 64,
                 block_when_full: bool = True, threaded: bool = True):
        if workers < 1:
            raise ValueError("need at least one networker worker")
        self._connect = connect
        self.workers = workers
        self.connects = 0
        self.round_trips = 0
        self._count_lock = threading.Lock()
        self.rings = [MetadataRing(ring_capacity, block_when_full=block_when_full) for _ in range(workers)]
        self.connections = []
        try:
            for _ in range(workers):
                self.connections.append(self._open())
        except _TRANSPORT_ERRORS as exc:
            for c in self.connections:
                c.close()
            raise TransportError(f"cannot connect: {exc}") from exc
        self.threaded = threaded
        self._threads = []
        if threaded:
            self._threads = [threading.Thread(target=self._loop, args=(i,), name=f"networker-{i}", daemon=True)
                             for i in range(workers)]
        for t in self._threads:
            t.start()

    def _open(self):
        conn = self._connect()
        with self._count_lock:
            self.connects += 1
        return conn

    def submit(self, frame: RequestFrame, worker: int = 0) -> Future:
        fut: Future = Future()
        i = worker % self.workers
        self.rings[i].put((frame, fut))
        if not self.threaded:
            self._service(i, *self.rings[i].get_nowait())
        return fut

    def fetch_remote(self, frame: RequestFrame, worker: int = 0) -> Exchange:
        exchange = self.submit(frame, worker).result()
        status = exchange.response.status
        if status != Status.OK:
            raise RemoteError(status, frame)
        return exchange

    def _loop(self, i: int):
        ring = self.rings[i]
        while True:
            item = ring.get()
            if item is None:
                return
            self._service(i, *item)

    def _service(self, i: int, frame: RequestFrame, fut: Future):
        try:
            fut.set_result(self._exchange(i, frame))
        except BaseException as exc:
            fut.set_exception(exc)

    def _exchange(self, i: int, frame: RequestFrame) -> Exchange:
        start = time.perf_counter_ns()
        try:
            response, sources = self.connections[i].request(frame)
        except _TRANSPORT_ERRORS:
            # one reconnect, then give up
            self.connections[i].close()
            try:
                self.connections[i] = self._open()
                response, sources = self.connections[i].request(frame)
            except _TRANSPORT_ERRORS as exc:
                raise TransportError(f"connection lost: {exc}") from exc
        if not frame.end_of_run:
            with self._count_lock:
                self.round_trips += 1
        return Exchange(response, sources, (time.perf_counter_ns() - start) / 1000)

    def close(self):
        if self.threaded:
            for ring in self.rings:
                ring.put(None)
        for t in self._threads:
            t.join(timeout=5)
        for c in self.connections:
            c.close()


# -- replay ------------------------------------------------------------------

@dataclass
class ClientConfig:
    server_addr: str = "127.0.0.1:7420"
    block_size: int = 4096
    pool_capacity: int = 256
    cache_pages: int = 65536
    workers: int = 1
    redirect_names: tuple[str, ...] | None = None  # None: redirect the trace's executable
    ring_capacity: int = 64
    threaded: bool = True


@dataclass
class EventRecord:
    seq: int
    block: int
    hit: bool
    round_trip: bool
    latency_us: float
    delivered: int = 0
    route: Route | None = None
    backing_reads: int = 0
    lost: bool = False


@dataclass
class RunReport:
    executable: str
    records: list[EventRecord] = field(default_factory=list)
    complete: bool = True
    error: str | None = None
    round_trips: int = 0
    connections: int = 0
    delivered: list[int] = field(default_factory=list)  # every block received, in order
    token: bytes = b""

    @property
    def hits(self) -> int:
        return sum(r.hit for r in self.records)

    @property
    def latencies(self) -> list[float]:
        return [r.latency_us for r in self.records]

    @property
    def backing_reads(self) -> int:
        return sum(r.backing_reads for r in self.records)

    def to_csv(self) -> str:
        lines = ["seq,block,hit,round_trip,latency_us"]
        for r in self.records:
            lines.append(f"{r.seq},{r.block},{int(r.hit)},{int(r.round_trip)},{r.latency_us:.1f}")
        return "\n".join(lines) + "\n"


class ClientRuntime:
    """Owns the networker, pool and cache for one or more replays.

    Runs on different ``ClientRuntime`` instances share nothing.
    """

    def __init__(self, config: ClientConfig | None = None, *, connect: Callable[[], object] | None = None,
                 server=None, model: LatencyModel | None = None, clock=None, pool_background: bool = True):
        self.config = config or ClientConfig()
        if server is not None:
            if server.config.block_size != self.config.block_size:
                raise ValueError(f"client block size {self.config.block_size} does not match "
                                 f"server block size {server.config.block_size}")
            connect = connect or (lambda: LoopbackConnection(server, self.config.block_size))
            clock = clock or server.clock
        if connect is None:
            from .server import parse_addr
            addr = parse_addr(self.config.server_addr)
            connect = lambda: TcpConnection(addr, self.config.block_size)  # noqa: E731
        self.model = model
        self.clock = clock
        self.pool = PagePool(self.config.pool_capacity, background=pool_background)
        self.cache = PageCache(self.config.cache_pages,
                               on_evict=lambda pages: self.pool.release(p.handle for p in pages))
        self.networker = Networker(connect, self.config.workers, ring_capacity=self.config.ring_capacity,
                                   threaded=self.config.threaded)

    def close(self):
        self.networker.close()
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def run(self, trace: Trace, *, rng_salt: int = 0, token: bytes | None = None,
            loss: LossProcess | None = None) -> RunReport:
        config = self.config
        names = RedirectSet(config.redirect_names if config.redirect_names is not None else (trace.executable,))
        token = token or uuid.uuid4().bytes
        model = self.model
        if loss is None and model is not None:
            loss = model.loss_process(rng_salt)
        report = RunReport(trace.executable, token=token, connections=self.networker.connects)
        used_remote = False
        round_trips_before = self.networker.round_trips
        for seq, event in enumerate(trace.events):
            key = (trace.executable, event.block)
            start = time.perf_counter_ns() if model is None else 0
            if self.cache.lookup(key) is not None:
                latency = model.hit_us if model else (time.perf_counter_ns() - start) / 1000
                report.records.append(EventRecord(seq, event.block, True, False, latency))
            elif redirect(key, names) is Route.LOCAL:
                handle = self.pool.acquire(1)[0]
                self.cache.insert(key, Page(handle, bytes(config.block_size)))
                latency = model.disk_read if model else (time.perf_counter_ns() - start) / 1000
                report.records.append(EventRecord(seq, event.block, False, False, latency, route=Route.LOCAL))
            else:
                used_remote = True
                frame = RequestFrame(token, trace.executable, event.block)
                try:
                    exchange = self.networker.fetch_remote(frame, worker=seq % config.workers)
                except (TransportError, RemoteError) as exc:
                    report.complete = False
                    report.error = str(exc)
                    log.warning("replay aborted at seq=%d block=%d: %s", seq, event.block, exc)
                    break
                blocks = exchange.response.blocks
                handles = self.pool.acquire(len(blocks)) if blocks else []
                for (index, payload), handle in zip(blocks, handles):
                    self.cache.insert((trace.executable, index), Page(handle, payload))
                    report.delivered.append(index)
                lost = False
                if model is not None:
                    latency, lost = model.round_trip_us(len(blocks), exchange.sources, loss)
                else:
                    latency = exchange.wall_us
                backing = sum(1 for s in (exchange.sources or ()) if s == "backing")
                report.records.append(EventRecord(seq, event.block, False, True, latency, len(blocks),
                                                  Route.REMOTE, backing, lost))
            if self.clock is not None:
                self.clock.advance(latency + event.think_time)
        if used_remote:
            try:
                self.networker.submit(RequestFrame(token, trace.executable, 0, end_of_run=True)).result()
            except Exception as exc:  # end marker is best effort
                log.debug("end-of-run marker failed: %s", exc)
        report.round_trips = self.networker.round_trips - round_trips_before
        report.connections = self.networker.connects
        return report


def run_trace(trace: Trace, config: ClientConfig | None = None, **kw) -> RunReport:
    """Replay ``trace`` with a fresh client (cold cache, new token)."""
    run_kw = {k: kw.pop(k) for k in ("rng_salt", "token", "loss") if k in kw}
    with ClientRuntime(config, **kw) as runtime:
        return runtime.run(trace, **run_kw)
