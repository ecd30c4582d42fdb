"""Block server: predictor + provider behind the wire protocol."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping

from . import wire
from .model import Action, ActionStore, SEG_MAX
from .predictor import Predictor, PredictorConfig, UnknownExecutable
from .provider import STRATEGIES, ExecutableImage, OutOfRange, PreloadEntry, Provider
from .wire import RequestFrame, ResponseFrame, Status

log = logging.getLogger("blockstream.server")


class VirtualClock:
    """Microsecond clock advanced explicitly by the simulation."""

    def __init__(self, start: int = 0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> int:
        return self._now

    def advance(self, us: float) -> int:
        with self._lock:
            self._now += int(round(us))
            return self._now


class WallClock:
    def now(self) -> int:
        return time.monotonic_ns() // 1000

    def advance(self, us: float) -> int:
        return self.now()


@dataclass
class ServerConfig:
    block_size: int = 4096
    seg_max: int = SEG_MAX
    prefetch_strategy: str = "nv_async"
    variance_threshold: float = 0.1
    variance_estimator: str = "mean"
    prefetch_window: int = 3
    match_checkpoints: str = "figure"
    first_segment_matches: int = 2
    construction_timeout_us: int = 3_000_000
    session_idle_timeout_us: int = 10_000_000

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be positive")
        if self.prefetch_strategy not in STRATEGIES:
            raise ValueError(f"unknown prefetch strategy {self.prefetch_strategy!r}")
        if self.variance_estimator not in ("mean", "sum"):
            raise ValueError(f"unknown variance estimator {self.variance_estimator!r}")
        if self.variance_threshold < 0 or self.prefetch_window < 0:
            raise ValueError("variance_threshold and prefetch_window must be non-negative")
        self.predictor_config()

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(seg_max=self.seg_max, match_checkpoints=self.match_checkpoints,
                               first_segment_matches=self.first_segment_matches,
                               construction_timeout_us=self.construction_timeout_us,
                               session_idle_timeout_us=self.session_idle_timeout_us)


@dataclass(frozen=True)
class Served:
    frame: ResponseFrame
    sources: tuple[str, ...] = ()
    decision: object = None


@dataclass
class ServerStats:
    requests: int = 0
    blocks_sent: int = 0
    errors: int = 0
    log: list = field(default_factory=list)


class BlockServer:
    """Answers block requests with predicted block streams.

    ``record_requests`` keeps the (token, executable, block) sequence seen,
    which tests use to check ordering.
    """

    def __init__(self, images: Mapping[str, ExecutableImage], store: ActionStore | None = None,
                 config: ServerConfig | None = None, *, clock=None, background_prefetch: bool = False,
                 record_requests: bool = False):
        self.config = config or ServerConfig()
        self.clock = clock or WallClock()
        for img in images.values():
            if img.block_size != self.config.block_size:
                raise ValueError(f"image {img.name!r} uses block size {img.block_size}, "
                                 f"server configured for {self.config.block_size}")
        self.images = dict(images)
        self.predictor = Predictor(store, self.config.predictor_config(),
                                   known_executables=self.images.__contains__)
        self.provider = Provider(self.images, self.config.prefetch_strategy,
                                 threshold=self.config.variance_threshold,
                                 window=self.config.prefetch_window,
                                 estimator=self.config.variance_estimator,
                                 background=background_prefetch)
        self.preload_report: list[PreloadEntry] = self.provider.initialize(self.predictor.store)
        self.stats = ServerStats()
        self.record_requests = record_requests
        self.seen: list[tuple[bytes, str, int]] = []
        self._lock = threading.Lock()

    @property
    def store(self) -> ActionStore:
        return self.predictor.store

    def handle(self, frame: RequestFrame) -> Served:
        now = self.clock.now()
        if frame.end_of_run:
            self.predictor.end_run(frame.token, frame.executable)
            return Served(ResponseFrame(Status.OK))
        with self._lock:
            self.stats.requests += 1
            if self.record_requests:
                self.seen.append((frame.token, frame.executable, frame.block))
        image = self.images.get(frame.executable)
        if image is None:
            self.stats.errors += 1
            return Served(ResponseFrame(Status.UNKNOWN_EXECUTABLE))
        if frame.block >= image.total_blocks:
            self.stats.errors += 1
            return Served(ResponseFrame(Status.OUT_OF_RANGE))
        try:
            decision = self.predictor.handle_request(frame.token, frame.executable, frame.block, now)
        except UnknownExecutable:
            return Served(ResponseFrame(Status.UNKNOWN_EXECUTABLE))
        blocks = [b for b in decision.respond_blocks if b < image.total_blocks]
        try:
            payloads, sources = self.provider.read_blocks(image, blocks)
        except OutOfRange:
            return Served(ResponseFrame(Status.OUT_OF_RANGE))
        action = None
        if decision.action_id is not None:
            action = self.predictor.store.get(frame.executable, decision.action_id)
        self.provider.after_response(action, decision.segment_index)
        self.stats.blocks_sent += len(blocks)
        log.debug("served executable=%s block=%d count=%d change=%r",
                  frame.executable, frame.block, len(blocks), decision.state_change)
        return Served(ResponseFrame(Status.OK, tuple(zip(blocks, payloads))), tuple(sources), decision)

    def handle_bytes(self, data: bytes) -> bytes:
        return wire.encode_response(self.handle(wire.decode_request(data)).frame, self.config.block_size)

    def shutdown(self) -> list[Action]:
        """Finalize open constructions and stop background work."""
        done = self.predictor.flush()
        self.provider.close()
        return done


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: BlockServer = self.server.block_server
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        block_size = server.config.block_size
        while True:
            try:
                frame = wire.read_request(sock.recv)
            except EOFError:
                return
            except (wire.ProtocolError, wire.FrameValidationError, OSError) as exc:
                log.warning("dropping connection from %s: %s", self.client_address, exc)
                return
            reply = wire.encode_response(server.handle(frame).frame, block_size)
            try:
                sock.sendall(reply)
            except OSError:
                return


class TCPBlockServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, block_server: BlockServer):
        self.block_server = block_server
        super().__init__(address, _Handler)


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if host.startswith("[") and host.endswith("]"):
        host = host[1:-1]
    if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise ValueError(f"invalid address {text!r}, expected host:port")
    return host or "127.0.0.1", int(port)
