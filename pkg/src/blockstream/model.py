"""Domain types shared by the server, the client runtime and the harness.

Holds block traces, segments and actions, plus the text trace format and
the binary action-store format.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Mapping, Sequence

BLOCK_SIZE = 4096
SEG_MAX = 32

STORE_MAGIC = b"SSAS"
STORE_VERSION = 1


class TraceParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StoreFormatError(ValueError):
    """Raised when an action-store stream is corrupt or incompatible.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ActionKind(enum.IntEnum):
    STARTUP = 0
    EXIT = 1
    WORKLOAD = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "ActionKind":
        try:
            return cls[text.upper()]
        except KeyError:
            raise ValueError(f"unknown action kind {text!r}") from None


@dataclass(frozen=True)
class Segment:
    blocks: tuple[int, ...]

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("segment must hold at least one block")
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if min(self.blocks) < 0:
            raise ValueError("block indices must be non-negative")

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def first(self) -> int:
        return self.blocks[0]


@dataclass(frozen=True)
class Action:
    executable: str
    kind: ActionKind
    segments: tuple[Segment, ...]
    id: int = 0

    def __post_init__(self):
        if not self.segments:
            raise ValueError("action must hold at least one segment")
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "kind", ActionKind(self.kind))

    @property
    def blocks(self) -> tuple[int, ...]:
        """The recorded block stream, i.e. all segments concatenated."""
        return tuple(b for seg in self.segments for b in seg.blocks)

    def segment_lengths(self) -> list[int]:
        return [len(s) for s in self.segments]


def segment_split(blocks: Sequence[int], seg_max: int = SEG_MAX) -> list[Segment]:
    """Chunk a block stream greedily into segments of ``seg_max`` blocks.

    Only the last segment may be shorter.
    """
    if seg_max < 2:
        raise ValueError("seg_max must be at least 2")
    if len(blocks) == 0:
        raise ValueError("no blocks")
    return [Segment(tuple(blocks[i:i + seg_max])) for i in range(0, len(blocks), seg_max)]


def make_action(executable: str, blocks: Sequence[int], *, kind=ActionKind.WORKLOAD,
                id: int = 0, seg_max: int = SEG_MAX) -> Action:
    return Action(executable, kind, tuple(segment_split(blocks, seg_max)), id)


@dataclass(frozen=True)
class ActionStore:
    """Immutable collection of actions, grouped per executable.

    Actions are kept sorted by executable name and id, so two stores with
    the same content compare equal and serialize to the same bytes.
    Mutators return a new store.
    """

    actions: Mapping[str, tuple[Action, ...]] = field(default_factory=dict)
    seg_max: int = SEG_MAX
    format_version: int = STORE_VERSION

    def __post_init__(self):
        canonical = {}
        for name in sorted(self.actions):
            acts = tuple(sorted(self.actions[name], key=lambda a: a.id))
            if not acts:
                continue
            ids = [a.id for a in acts]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate action id for {name!r}")
            for a in acts:
                if a.executable != name:
                    raise ValueError(f"action for {a.executable!r} filed under {name!r}")
                if any(len(s) > self.seg_max for s in a.segments):
                    raise ValueError(f"segment longer than seg_max={self.seg_max}")
            canonical[name] = acts
        object.__setattr__(self, "actions", canonical)

    @classmethod
    def from_actions(cls, actions: Iterable[Action], seg_max: int = SEG_MAX) -> "ActionStore":
        grouped: dict[str, list[Action]] = {}
        for a in actions:
            grouped.setdefault(a.executable, []).append(a)
        return cls({k: tuple(v) for k, v in grouped.items()}, seg_max=seg_max)

    def for_executable(self, executable: str) -> tuple[Action, ...]:
        return self.actions.get(executable, ())

    def get(self, executable: str, action_id: int) -> Action:
        for a in self.for_executable(executable):
            if a.id == action_id:
                return a
        raise KeyError((executable, action_id))

    def __iter__(self):
        for acts in self.actions.values():
            yield from acts

    def __len__(self) -> int:
        return sum(len(v) for v in self.actions.values())

    def next_id(self, executable: str) -> int:
        acts = self.for_executable(executable)
        return acts[-1].id + 1 if acts else 0

    def add(self, action: Action) -> "ActionStore":
        merged = dict(self.actions)
        merged[action.executable] = self.for_executable(action.executable) + (action,)
        return ActionStore(merged, seg_max=self.seg_max, format_version=self.format_version)


# -- trace format ---------------------------------------------------------

@dataclass(frozen=True)
class TraceEvent:
    block: int
    think_time: int = 0  # microseconds of compute before the next fault


@dataclass(frozen=True)
class Trace:
    executable: str
    events: tuple[TraceEvent, ...]

    def __post_init__(self):
        if not self.events:
            raise ValueError("empty trace")
        object.__setattr__(self, "events", tuple(self.events))

    @classmethod
    def from_blocks(cls, executable: str, blocks: Iterable[int], think_time: int = 0) -> "Trace":
        return cls(executable, tuple(TraceEvent(int(b), think_time) for b in blocks))

    @property
    def blocks(self) -> list[int]:
        return [e.block for e in self.events]

    def distinct_blocks(self) -> list[int]:
        """Blocks in first-touch order, duplicates dropped."""
        return list(dict.fromkeys(self.blocks))

    def __len__(self) -> int:
        return len(self.events)


def parse_trace(text: str) -> Trace:
    executable = None
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise TraceParseError("expected '<executable> <block_index> [<think_time_us>]'", lineno)
        name = parts[0]
        try:
            block = int(parts[1])
            think = int(parts[2]) if len(parts) == 3 else 0
        except ValueError:
            raise TraceParseError(f"non-integer field in {line!r}", lineno) from None
        if block < 0:
            raise TraceParseError(f"negative block index {block}", lineno)
        if think < 0:
            raise TraceParseError(f"negative think time {think}", lineno)
        if executable is None:
            executable = name
        elif name != executable:
            raise TraceParseError(f"trace mixes executables {executable!r} and {name!r}", lineno)
        events.append(TraceEvent(block, think))
    if not events:
        raise TraceParseError("empty trace")
    return Trace(executable, tuple(events))


def format_trace(trace: Trace) -> str:
    return "".join(f"{trace.executable} {e.block} {e.think_time}\n" for e in trace.events)


def read_trace(path) -> Trace:
    with open(path, encoding="utf-8") as f:
        return parse_trace(f.read())


# -- action store format --------------------------------------------------

_HEADER = struct.Struct(">4sHH")
_ACTION_HEAD = struct.Struct(">BII")


def save_actions(store: ActionStore, sink: BinaryIO) -> int:
    """Write ``store`` to ``sink`` and return the number of bytes written."""
    out = bytearray(_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.seg_max))
    for action in store:
        name = action.executable.encode("utf-8")
        out += struct.pack(">H", len(name)) + name
        out += _ACTION_HEAD.pack(int(action.kind), action.id, len(action.segments))
        for seg in action.segments:
            out += struct.pack(f">H{len(seg)}I", len(seg), *seg.blocks)
    sink.write(out)
    return len(out)


def dumps_actions(store: ActionStore) -> bytes:
    buf = io.BytesIO()
    save_actions(store, buf)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str | struct.Struct, what: str):
        st = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        if self.pos + st.size > len(self.data):
            raise StoreFormatError(f"truncated {what}", self.pos)
        values = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return values

    def raw(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise StoreFormatError(f"truncated {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_actions(source: BinaryIO | bytes) -> ActionStore:
    data = source if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
    r = _Reader(bytes(data))
    magic, version, seg_max = r.take(_HEADER, "header")
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}", 0)
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported store version {version}", 4)
    if seg_max < 2:
        raise StoreFormatError(f"invalid seg_max {seg_max}", 6)
    actions = []
    while r.pos < len(r.data):
        start = r.pos
        (name_len,) = r.take(">H", "name length")
        try:
            name = r.raw(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise StoreFormatError("name is not valid UTF-8", start + 2) from None
        kind_pos = r.pos
        kind, action_id, nseg = r.take(_ACTION_HEAD, "action header")
        if kind not in ActionKind._value2member_map_:
            raise StoreFormatError(f"unknown action kind {kind}", kind_pos)
        if nseg == 0:
            raise StoreFormatError("action without segments", kind_pos + 5)
        segments = []
        for _ in range(nseg):
            seg_pos = r.pos
            (length,) = r.take(">H", "segment length")
            if length == 0 or length > seg_max:
                raise StoreFormatError(f"segment length {length} outside 1..{seg_max}", seg_pos)
            segments.append(Segment(r.take(f">{length}I", "segment blocks")))
        actions.append(Action(name, ActionKind(kind), tuple(segments), action_id))
    try:
        return ActionStore.from_actions(actions, seg_max=seg_max)
    except ValueError as exc:
        raise StoreFormatError(str(exc), r.pos) from None


def loads_actions(data: bytes) -> ActionStore:
    return load_actions(data)


def read_store(path) -> ActionStore:
    with open(path, "rb") as f:
        return load_actions(f)
