"""Server-side block supply.

Executable images live in flat files (``<root>/<name>.img``) or in memory.
Each image tracks which blocks are resident in the server's memory cache.
Residency comes from three places: the preload done at start-up, the
asynchronous prefetch that trails the predictor, and promotion after a
block is read from backing storage.
"""

from __future__ import annotations

import hashlib
import logging
import os
import queue
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import BLOCK_SIZE, Action, ActionStore, Segment

log = logging.getLogger("blockstream.provider")

STRATEGIES = ("none", "full", "norm_var", "nv_async")

MEMCACHE = "memcache"
BACKING = "backing"


class OutOfRange(IndexError):
    pass


class MissingImage(LookupError):
    pass


def normalize_segment(segment: Segment | Sequence[int]) -> list[float]:
    blocks = segment.blocks if isinstance(segment, Segment) else tuple(segment)
    if not blocks:
        raise ValueError("empty segment")
    lo, hi = min(blocks), max(blocks)
    if hi == lo:
        return [0.0] * len(blocks)
    span = hi - lo
    return [(b - lo) / span for b in blocks]


def segment_variance(segment: Segment | Sequence[int], estimator: str = "mean") -> float:
    """Scatter of a segment's block indices after min-max normalization.

    ``estimator="mean"`` is the population variance; ``"sum"`` returns the
    plain sum of squared deviations.
    """
    values = normalize_segment(segment)
    avg = sum(values) / len(values)
    total = sum((avg - v) * (avg - v) for v in values)
    if estimator == "sum":
        return total
    if estimator != "mean":
        raise ValueError(f"unknown variance estimator {estimator!r}")
    return total / len(values)


@dataclass(frozen=True)
class SegmentStats:
    action_id: int
    segment_index: int
    b_min: int
    b_max: int
    normalized: tuple[float, ...]
    variance: float


def segment_stats(action: Action, estimator: str = "mean") -> list[SegmentStats]:
    out = []
    for i, seg in enumerate(action.segments):
        norm = tuple(normalize_segment(seg))
        out.append(SegmentStats(action.id, i, min(seg.blocks), max(seg.blocks), norm,
                                segment_variance(seg, estimator)))
    return out


def synthetic_bytes(name: str, total_blocks: int, block_size: int = BLOCK_SIZE) -> bytes:
    """Deterministic pseudo-random image contents seeded by the name."""
    seed = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")
    return np.random.default_rng(seed).bytes(total_blocks * block_size)


class ExecutableImage:
    """Block store for one executable plus its memory-cache residency.

    ``memcache_capacity`` bounds residency with FIFO eviction; ``None``
    means unbounded.
    """

    def __init__(self, name: str, data: bytes | None = None, *, path: str | os.PathLike | None = None,
                 block_size: int = BLOCK_SIZE, memcache_capacity: int | None = None):
        if (data is None) == (path is None):
            raise ValueError("give exactly one of data or path")
        self.name = name
        self.block_size = block_size
        self.path = Path(path) if path is not None else None
        if data is not None:
            size = len(data)
            self._data = memoryview(data)
        else:
            size = self.path.stat().st_size
            self._data = None
        if size % block_size:
            raise ValueError(f"image {name!r} is {size} bytes, not a multiple of {block_size}")
        self.total_blocks = size // block_size
        self.memcache_capacity = memcache_capacity
        self._resident: OrderedDict[int, None] = OrderedDict()
        self.ahead: set[int] = set()  # made resident before any client asked for it
        self.counters = {MEMCACHE: 0, BACKING: 0, "prefetch": 0}
        self._lock = threading.Lock()

    @classmethod
    def synthetic(cls, name: str, total_blocks: int, block_size: int = BLOCK_SIZE, **kw) -> "ExecutableImage":
        return cls(name, synthetic_bytes(name, total_blocks, block_size), block_size=block_size, **kw)

    @classmethod
    def from_file(cls, path, block_size: int = BLOCK_SIZE, **kw) -> "ExecutableImage":
        path = Path(path)
        return cls(path.stem, path=path, block_size=block_size, **kw)

    def cold_copy(self) -> "ExecutableImage":
        """Same backing bytes, empty memory cache and fresh counters."""
        if self._data is not None:
            return ExecutableImage(self.name, self._data, block_size=self.block_size,
                                   memcache_capacity=self.memcache_capacity)
        return ExecutableImage(self.name, path=self.path, block_size=self.block_size,
                               memcache_capacity=self.memcache_capacity)

    def backing_read(self, index: int) -> bytes:
        self._check(index)
        start = index * self.block_size
        if self._data is not None:
            return bytes(self._data[start:start + self.block_size])
        with open(self.path, "rb") as f:
            return os.pread(f.fileno(), self.block_size, start)

    def _check(self, index: int):
        if not 0 <= index < self.total_blocks:
            raise OutOfRange(f"block {index} outside {self.name!r} ({self.total_blocks} blocks)")

    def is_resident(self, index: int) -> bool:
        return index in self._resident

    @property
    def resident(self) -> set[int]:
        return set(self._resident)

    def make_resident(self, index: int, *, ahead: bool = False) -> bool:
        """Mark a block resident; return True if it was not resident before."""
        self._check(index)
        with self._lock:
            if index in self._resident:
                return False
            self._resident[index] = None
            if ahead:
                self.ahead.add(index)
            if self.memcache_capacity is not None:
                while len(self._resident) > self.memcache_capacity:
                    self._resident.popitem(last=False)
            return True

    def evict_all(self):
        with self._lock:
            self._resident.clear()


def load_images(root, block_size: int = BLOCK_SIZE) -> dict[str, ExecutableImage]:
    images = {}
    for path in sorted(Path(root).glob("*.img")):
        images[path.stem] = ExecutableImage.from_file(path, block_size)
    return images


def write_image(root, name: str, total_blocks: int, block_size: int = BLOCK_SIZE) -> Path:
    path = Path(root) / f"{name}.img"
    path.write_bytes(synthetic_bytes(name, total_blocks, block_size))
    return path


@dataclass(frozen=True)
class PreloadEntry:
    executable: str
    action_id: int
    segment_index: int
    variance: float
    preloaded: bool
    first_segment: bool


def init_preload(store: ActionStore, images: Mapping[str, ExecutableImage], threshold: float,
                 estimator: str = "mean") -> list[PreloadEntry]:
    """Make high-variance segments and every action's first segment resident."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    report = []
    for action in store:
        image = images.get(action.executable)
        if image is None:
            raise MissingImage(f"no image for executable {action.executable!r}")
        for i, seg in enumerate(action.segments):
            var = segment_variance(seg, estimator)
            preload = var > threshold or i == 0
            if preload:
                for b in seg.blocks:
                    if b < image.total_blocks and image.make_resident(b, ahead=True):
                        image.counters["prefetch"] += 1
            report.append(PreloadEntry(action.executable, action.id, i, var, var > threshold, i == 0))
    return report


class Provider:
    """Reads blocks for responses and keeps the memory cache warm.

    With ``background=True`` a worker thread drains the prefetch queue.
    Otherwise queued work runs when ``drain()`` is called, which the
    simulator does after each response so prefetching stays off the
    response path while remaining deterministic.
    """

    def __init__(self, images: Mapping[str, ExecutableImage], strategy: str = "nv_async", *,
                 threshold: float = 0.1, window: int = 3, estimator: str = "mean",
                 background: bool = False):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown prefetch strategy {strategy!r}")
        if window < 0:
            raise ValueError("prefetch window must be non-negative")
        self.images = dict(images)
        self.strategy = strategy
        self.threshold = threshold
        self.window = window
        self.estimator = estimator
        self.background = background
        self._queue: queue.Queue = queue.Queue()
        self._queued: set[tuple[str, int, int]] = set()
        self._qlock = threading.Lock()
        self._worker = None
        self._closed = False
        if background:
            self._worker = threading.Thread(target=self._run_worker, name="prov", daemon=True)
            self._worker.start()

    def initialize(self, store: ActionStore) -> list[PreloadEntry]:
        if self.strategy == "full":
            for image in self.images.values():
                for b in range(image.total_blocks):
                    if image.make_resident(b, ahead=True):
                        image.counters["prefetch"] += 1
            return []
        if self.strategy in ("norm_var", "nv_async"):
            return init_preload(store, self.images, self.threshold, self.estimator)
        return []

    def read_blocks(self, image: ExecutableImage, indices: Iterable[int]) -> tuple[list[bytes], list[str]]:
        indices = list(indices)
        for i in indices:
            image._check(i)
        promote = self.strategy != "none"
        payloads, sources = [], []
        counters = image.counters
        for i in indices:
            payloads.append(image.backing_read(i))
            if image.is_resident(i):
                sources.append(MEMCACHE)
                counters[MEMCACHE] += 1
            else:
                sources.append(BACKING)
                counters[BACKING] += 1
                if promote:
                    image.make_resident(i)
        return payloads, sources

    def runtime_prefetch(self, action: Action, just_served: int, window: int | None = None) -> list[int]:
        """Queue the segments after ``just_served`` for background residency."""
        window = self.window if window is None else window
        image = self.images.get(action.executable)
        if image is None:
            return []
        last = min(just_served + window, len(action.segments) - 1)
        scheduled = []
        for si in range(just_served + 1, last + 1):
            seg = action.segments[si]
            if all(image.is_resident(b) for b in seg.blocks):
                continue
            key = (action.executable, action.id, si)
            with self._qlock:
                if key in self._queued:
                    continue
                self._queued.add(key)
            self._queue.put((key, seg))
            scheduled.append(si)
        return scheduled

    def after_response(self, action: Action | None, segment_index: int | None):
        if self.strategy == "nv_async" and action is not None and segment_index is not None:
            self.runtime_prefetch(action, segment_index)
        if not self.background:
            self.drain()

    def _load(self, item):
        key, seg = item
        image = self.images[key[0]]
        for b in seg.blocks:
            if b < image.total_blocks and image.make_resident(b, ahead=True):
                image.backing_read(b)
                image.counters["prefetch"] += 1
        with self._qlock:
            self._queued.discard(key)

    def drain(self):
        """Wait until every queued prefetch has landed."""
        if self.background:
            self._queue.join()
            return
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return
            try:
                self._load(item)
            finally:
                self._queue.task_done()

    def pending(self) -> int:
        return self._queue.qsize()

    def _run_worker(self):
        while True:
            item = self._queue.get()
            if item is None:
                self._queue.task_done()
                return
            try:
                self._load(item)
            except Exception:  # keep serving even if one prefetch fails
                log.exception("prefetch failed for %s", item[0])
            finally:
                self._queue.task_done()

    def close(self):
        if self._worker is not None and not self._closed:
            self._closed = True
            self._queue.put(None)
            self._worker.join(timeout=5)
