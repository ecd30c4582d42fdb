"""Framing for block requests and block-stream responses.

All integers are big-endian.

Request (``msg_type`` 0, or 2 for end-of-run)::

    'S' 'F' | version u8 | msg_type u8 | token[16] | name_len u16 | name | block u32

Response (``msg_type`` 1)::

    'S' 'F' | version u8 | msg_type u8 | status u8 | reserved u8 | count u16
    then count x (block u32 | block_size payload bytes)

``block_size`` is fixed per connection and never sent on the wire.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

MAGIC = b"SF"
VERSION = 1

MSG_REQUEST = 0
MSG_RESPONSE = 1
MSG_END = 2

MAX_NAME = 255
MAX_BLOCKS = 0xFFFF
TOKEN_LEN = 16

_REQ_HEAD = struct.Struct(">2sBB16sH")
_RESP_HEAD = struct.Struct(">2sBBBBH")
_U32 = struct.Struct(">I")

REQUEST_HEADER_SIZE = _REQ_HEAD.size  # 22, name and block index follow
RESPONSE_HEADER_SIZE = _RESP_HEAD.size  # 8


class ProtocolError(Exception):
    pass


class TruncatedFrame(ProtocolError):
    pass


class FrameValidationError(ValueError):
    pass


class Status(enum.IntEnum):
    OK = 0
    UNKNOWN_EXECUTABLE = 1
    OUT_OF_RANGE = 2


@dataclass(frozen=True)
class RequestFrame:
    token: bytes
    executable: str
    block: int
    end_of_run: bool = False

    def __post_init__(self):
        if len(self.token) != TOKEN_LEN:
            raise FrameValidationError(f"token must be {TOKEN_LEN} bytes")
        name = self.executable.encode("utf-8")
        if not name:
            raise FrameValidationError("executable name is empty")
        if len(name) > MAX_NAME:
            raise FrameValidationError(f"executable name longer than {MAX_NAME} bytes")
        if not 0 <= self.block <= 0xFFFFFFFF:
            raise FrameValidationError(f"block index {self.block} does not fit u32")

    @property
    def wire_size(self) -> int:
        return REQUEST_HEADER_SIZE + len(self.executable.encode("utf-8")) + 4


@dataclass(frozen=True)
class ResponseFrame:
    status: Status = Status.OK
    blocks: tuple[tuple[int, bytes], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "status", Status(self.status))
        object.__setattr__(self, "blocks", tuple((int(i), bytes(p)) for i, p in self.blocks))
        if self.status != Status.OK and self.blocks:
            raise FrameValidationError("error responses carry no blocks")
        if len(self.blocks) > MAX_BLOCKS:
            raise FrameValidationError(f"more than {MAX_BLOCKS} blocks in one response")

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.blocks]


def encode_request(frame: RequestFrame) -> bytes:
    name = frame.executable.encode("utf-8")
    msg_type = MSG_END if frame.end_of_run else MSG_REQUEST
    return _REQ_HEAD.pack(MAGIC, VERSION, msg_type, frame.token, len(name)) + name + _U32.pack(frame.block)


def encode_response(frame: ResponseFrame, block_size: int) -> bytes:
    parts = [_RESP_HEAD.pack(MAGIC, VERSION, MSG_RESPONSE, int(frame.status), 0, len(frame.blocks))]
    for index, payload in frame.blocks:
        if len(payload) != block_size:
            raise FrameValidationError(f"payload of block {index} is {len(payload)} bytes, expected {block_size}")
        if not 0 <= index <= 0xFFFFFFFF:
            raise FrameValidationError(f"block index {index} does not fit u32")
        parts.append(_U32.pack(index))
        parts.append(payload)
    return b"".join(parts)


def _check_prefix(buf, expected_type: tuple[int, ...]) -> int:
    if len(buf) < 4:
        raise TruncatedFrame("frame shorter than its fixed prefix")
    if bytes(buf[:2]) != MAGIC:
        raise ProtocolError(f"bad magic {bytes(buf[:2])!r}")
    if buf[2] != VERSION:
        raise ProtocolError(f"unsupported version {buf[2]}")
    if buf[3] not in expected_type:
        raise ProtocolError(f"unexpected message type {buf[3]}")
    return buf[3]


def request_length(buf) -> int | None:
    """Total length of the request frame at the start of ``buf``, or None if
    not enough bytes are buffered to tell."""
    if len(buf) < REQUEST_HEADER_SIZE:
        if len(buf) >= 4:
            _check_prefix(buf, (MSG_REQUEST, MSG_END))
        return None
    _check_prefix(buf, (MSG_REQUEST, MSG_END))
    name_len = struct.unpack_from(">H", buf, REQUEST_HEADER_SIZE - 2)[0]
    return REQUEST_HEADER_SIZE + name_len + 4


def response_length(buf, block_size: int) -> int | None:
    if len(buf) < RESPONSE_HEADER_SIZE:
        if len(buf) >= 4:
            _check_prefix(buf, (MSG_RESPONSE,))
        return None
    _check_prefix(buf, (MSG_RESPONSE,))
    count = struct.unpack_from(">H", buf, RESPONSE_HEADER_SIZE - 2)[0]
    return RESPONSE_HEADER_SIZE + count * (4 + block_size)


def decode_request_prefix(buf) -> tuple[RequestFrame, int]:
    """Decode one request from the front of ``buf``; return it and its length."""
    total = request_length(buf)
    if total is None or len(buf) < total:
        raise TruncatedFrame("short request frame")
    _, _, msg_type, token, name_len = _REQ_HEAD.unpack_from(buf, 0)
    if name_len == 0:
        raise FrameValidationError("executable name is empty")
    try:
        name = bytes(buf[REQUEST_HEADER_SIZE:REQUEST_HEADER_SIZE + name_len]).decode("utf-8")
    except UnicodeDecodeError:
        raise ProtocolError("executable name is not UTF-8") from None
    (block,) = _U32.unpack_from(buf, REQUEST_HEADER_SIZE + name_len)
    return RequestFrame(token, name, block, end_of_run=msg_type == MSG_END), total


def decode_response_prefix(buf, block_size: int) -> tuple[ResponseFrame, int]:
    total = response_length(buf, block_size)
    if total is None or len(buf) < total:
        raise TruncatedFrame("short response frame")
    _, _, _, status, _, count = _RESP_HEAD.unpack_from(buf, 0)
    try:
        status = Status(status)
    except ValueError:
        raise ProtocolError(f"unknown status {status}") from None
    if status != Status.OK and count:
        raise ProtocolError("error response carries blocks")
    blocks = []
    pos = RESPONSE_HEADER_SIZE
    for _ in range(count):
        (index,) = _U32.unpack_from(buf, pos)
        blocks.append((index, bytes(buf[pos + 4:pos + 4 + block_size])))
        pos += 4 + block_size
    return ResponseFrame(status, tuple(blocks)), total


def decode_request(data: bytes) -> RequestFrame:
    frame, used = decode_request_prefix(data)
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} trailing bytes after request frame")
    return frame


def decode_response(data: bytes, block_size: int) -> ResponseFrame:
    frame, used = decode_response_prefix(data, block_size)
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} trailing bytes after response frame")
    return frame


class FrameBuffer:
    """Incremental decoder for a byte stream of back-to-back frames.

    ``kind`` selects which side of the conversation is being decoded.
    """

    def __init__(self, kind: str = "request", block_size: int = 4096):
        if kind not in ("request", "response"):
            raise ValueError(kind)
        self.kind = kind
        self.block_size = block_size
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf += data
        return list(self._drain())

    def _drain(self) -> Iterator:
        while True:
            if self.kind == "request":
                total = request_length(self._buf)
            else:
                total = response_length(self._buf, self.block_size)
            if total is None or len(self._buf) < total:
                return
            chunk = bytes(self._buf[:total])
            del self._buf[:total]
            if self.kind == "request":
                yield decode_request(chunk)
            else:
                yield decode_response(chunk, self.block_size)

    @property
    def pending(self) -> int:
        return len(self._buf)


def read_exact(recv: Callable[[int], bytes], n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = recv(remaining)
        if not chunk:
            if remaining == n:
                raise EOFError("connection closed")
            raise TruncatedFrame(f"connection closed with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_request(recv: Callable[[int], bytes]) -> RequestFrame:
    head = read_exact(recv, REQUEST_HEADER_SIZE)
    total = request_length(head)
    return decode_request(head + read_exact(recv, total - REQUEST_HEADER_SIZE))


def read_response(recv: Callable[[int], bytes], block_size: int) -> ResponseFrame:
    head = read_exact(recv, RESPONSE_HEADER_SIZE)
    total = response_length(head, block_size)
    rest = read_exact(recv, total - RESPONSE_HEADER_SIZE) if total > RESPONSE_HEADER_SIZE else b""
    return decode_response(head + rest, block_size)
