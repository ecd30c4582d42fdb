"""Server-side action predictor.

Each (token, executable) pair owns a session that moves through three
stages. While *constructing*, every request is answered with the single
requested block and recorded. While *matching*, the first segment of a
stored action is released in slices, each slice unlocked by the client
asking for the block at the next checkpoint. While *generating*, asking
for the first block of the next segment releases that whole segment.
A request that breaks the expected pattern falls back to scanning every
segment of every action for the requested block.
"""

from __future__ import annotations

import enum
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .model import SEG_MAX, Action, ActionKind, ActionStore, segment_split

log = logging.getLogger("blockstream.predictor")

US = 1_000_000


class UnknownExecutable(LookupError):
    pass


class Stage(enum.Enum):
    CONSTRUCTING = "constructing"
    MATCHING = "matching"
    GENERATING = "generating"


@dataclass
class PredictorConfig:
    seg_max: int = SEG_MAX
    match_checkpoints: str = "figure"  # or "prose"
    first_segment_matches: int = 2
    construction_timeout_us: int = 3 * US
    session_idle_timeout_us: int = 10 * US
    default_kind: ActionKind = ActionKind.WORKLOAD

    def __post_init__(self):
        if self.seg_max < 2:
            raise ValueError("seg_max must be at least 2")
        if self.match_checkpoints not in ("figure", "prose"):
            raise ValueError(f"match_checkpoints must be 'figure' or 'prose', not {self.match_checkpoints!r}")
        if self.first_segment_matches not in (2, 3):
            raise ValueError("first_segment_matches must be 2 or 3")


def checkpoint_cuts(segment_len: int, config: PredictorConfig) -> tuple[int, ...]:
    """0-based offsets in the first segment at which a new match is required.

    A request for ``blocks[cuts[i]]`` is answered with
    ``blocks[cuts[i]:cuts[i + 1]]`` (the last slice runs to the segment end).
    """
    seg_max = config.seg_max
    if config.match_checkpoints == "figure":
        raw = [0, 2]
    else:
        raw = [0, 1, seg_max - 3]
    if config.first_segment_matches == 3:
        raw.append(math.ceil(seg_max / 2) - 1)
    return tuple(sorted({c for c in raw if 0 <= c < segment_len}))


@dataclass
class ActionSession:
    token: bytes
    executable: str
    stage: Stage
    started: int
    last_activity: int
    action_id: int | None = None
    match_checkpoint: int | None = None  # index into the first segment
    cut_index: int = 0
    next_segment: int = 0
    construction_buffer: list[int] = field(default_factory=list)

    def describe(self) -> str:
        token = self.token.hex()[:8]
        if self.stage is Stage.CONSTRUCTING:
            return f"{token} {self.executable} constructing buffered={len(self.construction_buffer)}"
        if self.stage is Stage.MATCHING:
            return f"{token} {self.executable} matching action={self.action_id} checkpoint={self.match_checkpoint}"
        return f"{token} {self.executable} generating action={self.action_id} next_segment={self.next_segment}"


@dataclass(frozen=True)
class PredictorDecision:
    respond_blocks: tuple[int, ...]
    state_change: str
    action_id: int | None = None
    segment_index: int | None = None
    finalized: Action | None = None

    def __post_init__(self):
        object.__setattr__(self, "respond_blocks", tuple(self.respond_blocks))


def fallback_scan(actions: Iterable[Action], block: int) -> tuple[int, int] | None:
    """First (action id, segment index) whose segment contains ``block``."""
    for action in sorted(actions, key=lambda a: a.id):
        for si, seg in enumerate(action.segments):
            if block in seg.blocks:
                return action.id, si
    return None


class Predictor:
    """Session table plus the action store it matches against.

    ``handle_request`` is safe to call from several connection threads.
    The store is swapped atomically whenever an action is finalized, so a
    reader sees either the old or the new store, never a partial one.
    """

    def __init__(self, store: ActionStore | None = None, config: PredictorConfig | None = None, *,
                 known_executables: Callable[[str], bool] | None = None,
                 on_new_action: Callable[[Action], None] | None = None):
        self.config = config or PredictorConfig()
        if store is None:
            store = ActionStore(seg_max=self.config.seg_max)
        if store.seg_max != self.config.seg_max:
            raise ValueError(f"store built with seg_max={store.seg_max}, predictor configured for {self.config.seg_max}")
        self._store = store
        self._sessions: dict[tuple[bytes, str], ActionSession] = {}
        self._lock = threading.RLock()
        self._known = known_executables
        self._on_new_action = on_new_action

    @property
    def store(self) -> ActionStore:
        return self._store

    @property
    def sessions(self) -> dict[tuple[bytes, str], ActionSession]:
        return self._sessions

    def session(self, token: bytes, executable: str) -> ActionSession | None:
        return self._sessions.get((token, executable))

    def describe_sessions(self) -> list[str]:
        with self._lock:
            return [s.describe() for s in self._sessions.values()]

    # -- dispatch ---------------------------------------------------------

    def handle_request(self, token: bytes, executable: str, block: int, now: int = 0) -> PredictorDecision:
        with self._lock:
            finalized = self._expire(now, keep=(token, executable))
            key = (token, executable)
            session = self._sessions.get(key)
            if (session is not None and session.stage is Stage.CONSTRUCTING
                    and now - session.started >= self.config.construction_timeout_us):
                finalized = self._finalize(session) or finalized
                del self._sessions[key]
                session = None

            if session is None:
                if self._known is not None and not self._known(executable):
                    raise UnknownExecutable(executable)
                decision = self._start(key, block, now)
            else:
                session.last_activity = now
                if session.stage is Stage.CONSTRUCTING:
                    decision = self.construct_step(session, block, now)
                elif session.stage is Stage.MATCHING:
                    decision = self.match_first_segment(session, self._action(session), block, now)
                else:
                    decision = self.generate_step(session, self._action(session), block, now)
            if finalized is not None and decision.finalized is None:
                decision = PredictorDecision(decision.respond_blocks, decision.state_change,
                                             decision.action_id, decision.segment_index, finalized)
            return decision

    def end_run(self, token: bytes, executable: str) -> Action | None:
        """Close a session on an explicit end-of-run marker."""
        with self._lock:
            session = self._sessions.pop((token, executable), None)
            if session is not None and session.stage is Stage.CONSTRUCTING:
                return self._finalize(session)
            return None

    def expire(self, now: int) -> Action | None:
        with self._lock:
            return self._expire(now)

    def flush(self) -> list[Action]:
        """Finalize every open construction and drop all sessions."""
        with self._lock:
            done = []
            for session in list(self._sessions.values()):
                if session.stage is Stage.CONSTRUCTING:
                    action = self._finalize(session)
                    if action is not None:
                        done.append(action)
            self._sessions.clear()
            return done

    # -- stages -----------------------------------------------------------

    def construct_step(self, session: ActionSession, block: int, now: int) -> PredictorDecision:
        session.construction_buffer.append(block)
        session.last_activity = now
        return PredictorDecision((block,), "construct")

    def match_first_segment(self, session: ActionSession, action: Action, block: int,
                            now: int) -> PredictorDecision:
        first = action.segments[0]
        cuts = checkpoint_cuts(len(first), self.config)
        if session.match_checkpoint is not None and block == first.blocks[session.match_checkpoint]:
            return self._release_first_slice(session, action, cuts, session.cut_index, "checkpoint")
        return self._fallback(session, block, now)

    def generate_step(self, session: ActionSession, action: Action, block: int,
                      now: int) -> PredictorDecision:
        seg_index = session.next_segment
        if seg_index < len(action.segments) and block == action.segments[seg_index].first:
            seg = action.segments[seg_index]
            session.next_segment += 1
            change = "generate"
            if session.next_segment >= len(action.segments):
                self._complete(session)
                change = "generate; action complete"
            return PredictorDecision(seg.blocks, change, action.id, seg_index)
        return self._fallback(session, block, now)

    # -- helpers ----------------------------------------------------------

    def _start(self, key, block: int, now: int) -> PredictorDecision:
        token, executable = key
        for action in self._store.for_executable(executable):
            if action.segments[0].first == block:
                session = ActionSession(token, executable, Stage.MATCHING, now, now, action_id=action.id)
                self._sessions[key] = session
                cuts = checkpoint_cuts(len(action.segments[0]), self.config)
                return self._release_first_slice(session, action, cuts, 0, "match start")
        session = ActionSession(token, executable, Stage.MATCHING, now, now)
        self._sessions[key] = session
        return self._fallback(session, block, now)

    def _release_first_slice(self, session, action, cuts, i, reason) -> PredictorDecision:
        first = action.segments[0]
        end = cuts[i + 1] if i + 1 < len(cuts) else len(first)
        blocks = first.blocks[cuts[i]:end]
        if i + 1 < len(cuts):
            session.stage = Stage.MATCHING
            session.cut_index = i + 1
            session.match_checkpoint = cuts[i + 1]
            return PredictorDecision(blocks, f"{reason}; checkpoint at {cuts[i + 1] + 1}", action.id, 0)
        session.stage = Stage.GENERATING
        session.match_checkpoint = None
        session.next_segment = 1
        change = f"{reason}; generating"
        if len(action.segments) == 1:
            self._complete(session)
            change = f"{reason}; action complete"
        return PredictorDecision(blocks, change, action.id, 0)

    def _fallback(self, session: ActionSession, block: int, now: int) -> PredictorDecision:
        hit = fallback_scan(self._store.for_executable(session.executable), block)
        if hit is None:
            session.stage = Stage.CONSTRUCTING
            session.action_id = None
            session.match_checkpoint = None
            session.started = now
            session.last_activity = now
            session.construction_buffer = [block]
            return PredictorDecision((block,), "no action holds block; construct")
        action_id, seg_index = hit
        action = self._store.get(session.executable, action_id)
        seg = action.segments[seg_index]
        blocks = seg.blocks[seg.blocks.index(block):]
        session.stage = Stage.GENERATING
        session.action_id = action_id
        session.match_checkpoint = None
        session.next_segment = seg_index + 1
        session.last_activity = now
        change = f"rematch via scan to action {action_id} segment {seg_index}"
        if session.next_segment >= len(action.segments):
            self._complete(session)
            change += "; action complete"
        return PredictorDecision(blocks, change, action_id, seg_index)

    def _action(self, session: ActionSession) -> Action:
        return self._store.get(session.executable, session.action_id)

    def _complete(self, session: ActionSession):
        self._sessions.pop((session.token, session.executable), None)

    def _expire(self, now: int, keep=None) -> Action | None:
        finalized = None
        limit = self.config.session_idle_timeout_us
        for key, session in list(self._sessions.items()):
            if key == keep or now - session.last_activity < limit:
                continue
            del self._sessions[key]
            if session.stage is Stage.CONSTRUCTING:
                finalized = self._finalize(session) or finalized
        return finalized

    def _finalize(self, session: ActionSession) -> Action | None:
        blocks = session.construction_buffer
        session.construction_buffer = []
        if not blocks:
            return None
        stream = tuple(blocks)
        for existing in self._store.for_executable(session.executable):
            if existing.blocks == stream:
                log.debug("construction duplicates action %d of %s", existing.id, session.executable)
                return None
        action = Action(session.executable, self.config.default_kind,
                        tuple(segment_split(stream, self.config.seg_max)),
                        self._store.next_id(session.executable))
        self._store = self._store.add(action)
        log.info("constructed action executable=%s id=%d blocks=%d segments=%d",
                 action.executable, action.id, len(stream), len(action.segments))
        if self._on_new_action is not None:
            self._on_new_action(action)
        return action


def build_actions(streams: Sequence[tuple[str, Sequence[int]]], config: PredictorConfig | None = None,
                  store: ActionStore | None = None) -> ActionStore:
    """Construct actions offline from recorded request streams.

    Each stream is fed through a fresh session, then finalized.
    """
    predictor = Predictor(store, config)
    for n, (executable, blocks) in enumerate(streams):
        token = n.to_bytes(16, "big")
        session = ActionSession(token, executable, Stage.CONSTRUCTING, 0, 0,
                                construction_buffer=list(blocks))
        predictor._finalize(session)
    return predictor.store


__all__ = [
    "ActionSession", "Predictor", "PredictorConfig", "PredictorDecision", "Stage",
    "UnknownExecutable", "build_actions", "checkpoint_cuts", "fallback_scan"
]
