"""Binary wire format and static cell partitioning.

Frame layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"ITQS"
    4       1     protocol version (currently 1)
    5       1     message kind (see ``Kind``)
    6       2     reserved, must be zero
    8       4     body length in bytes (<= MAX_BODY)
    12      ...   body

Every body starts with ``study_id`` (u16 length + UTF-8) and
``simulation_id`` (i64).  Kind-specific fields follow; see the ``_encode_*``
helpers.  Data payloads are raw IEEE-754 float64 values so a round trip is
bit-exact.  A body must be consumed exactly; trailing bytes are an error.
"""
from __future__ import annotations

import bisect
import enum
import socket
import struct
from dataclasses import dataclass, field
from typing import ClassVar, Union

import numpy as np

from .errors import (
    BadMagicError,
    LengthOverflowError,
    MalformedFrameError,
    ProtocolError,
    TruncatedFrameError,
    VersionMismatchError,
)

MAGIC = b"ITQS"
VERSION = 1
MAX_BODY = 64 * 1024 * 1024
_HEADER = struct.Struct("<4sBBHI")
HEADER_SIZE = _HEADER.size


class Kind(enum.IntEnum):
    HELLO = 1
    WELCOME = 2
    DATA = 3
    GOODBYE = 4
    HEARTBEAT = 5
    ACK = 6


# -- partitioning ------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionMap:
    """Contiguous near-equal blocks of global cells, one per server rank."""

    n_cells: int
    n_ranks: int
    boundaries: tuple[int, ...]

    def cell_range(self, rank: int) -> tuple[int, int]:
        return self.boundaries[rank], self.boundaries[rank + 1]

    def owner(self, cell: int) -> int:
        if not 0 <= cell < self.n_cells:
            raise ValueError(f"cell {cell} outside [0, {self.n_cells})")
        return bisect.bisect_right(self.boundaries, cell) - 1


def build_partition_map(n_cells: int, n_ranks: int) -> PartitionMap:
    """Split ``n_cells`` into ``n_ranks`` blocks; the remainder goes to the lowest ranks."""
    if n_ranks < 1:
        raise ValueError("need at least one rank")
    if n_ranks > n_cells:
        raise ValueError(f"{n_ranks} ranks cannot share {n_cells} cells")
    base, extra = divmod(n_cells, n_ranks)
    bounds = [0]
    for r in range(n_ranks):
        bounds.append(bounds[-1] + base + (1 if r < extra else 0))
    return PartitionMap(n_cells, n_ranks, tuple(bounds))


def route(client_range: tuple[int, int], pmap: PartitionMap) -> list[tuple[int, tuple[int, int]]]:
    """Split a half-open global cell interval into ``(rank, sub-interval)`` pieces."""
    start, stop = client_range
    if not 0 <= start < stop <= pmap.n_cells:
        raise ValueError(f"interval [{start}, {stop}) outside [0, {pmap.n_cells})")
    out = []
    rank = pmap.owner(start)
    while start < stop:
        end = min(stop, pmap.boundaries[rank + 1])
        out.append((rank, (start, end)))
        start = end
        rank += 1
    return out


# -- messages ----------------------------------------------------------------------


@dataclass(frozen=True)
class Hello:
    kind: ClassVar[Kind] = Kind.HELLO
    study_id: str
    simulation_id: int
    fields: tuple[tuple[str, int, int], ...] = ()


@dataclass(frozen=True)
class Welcome:
    kind: ClassVar[Kind] = Kind.WELCOME
    study_id: str
    simulation_id: int
    rank: int = 0
    n_ranks: int = 1
    n_cells: int = 0
    cell_range: tuple[int, int] = (0, 0)
    n_timesteps: int = 0
    fields: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class Data:
    kind: ClassVar[Kind] = Kind.DATA
    study_id: str
    simulation_id: int
    field_name: str
    timestep: int
    offset: int
    payload: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "payload", np.ascontiguousarray(self.payload, dtype="<f8"))

    @property
    def value_count(self) -> int:
        return int(self.payload.size)

    @property
    def key(self) -> tuple[int, str, int]:
        return self.simulation_id, self.field_name, self.timestep

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Data):
            return NotImplemented
        return (
            (self.study_id, self.simulation_id, self.field_name, self.timestep, self.offset)
            == (other.study_id, other.simulation_id, other.field_name, other.timestep, other.offset)
            and self.payload.tobytes() == other.payload.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Goodbye:
    kind: ClassVar[Kind] = Kind.GOODBYE
    study_id: str
    simulation_id: int


@dataclass(frozen=True)
class Heartbeat:
    kind: ClassVar[Kind] = Kind.HEARTBEAT
    study_id: str
    simulation_id: int
    sequence: int = 0
    epoch: int = 0
    applied: int = 0
    timestamp: float = 0.0


@dataclass(frozen=True)
class Ack:
    kind: ClassVar[Kind] = Kind.ACK
    study_id: str
    simulation_id: int
    status: int = 0
    detail: str = ""


Message = Union[Hello, Welcome, Data, Goodbye, Heartbeat, Ack]


# -- encoding --------------------------------------------------------------------

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string longer than 65535 bytes")
    return _U16.pack(len(raw)) + raw


def encode_message(m: Message) -> bytes:
    parts = [_str(m.study_id), _I64.pack(m.simulation_id)]
    if isinstance(m, Hello):
        parts.append(_U16.pack(len(m.fields)))
        for name, start, stop in m.fields:
            parts += [_str(name), _U64.pack(start), _U64.pack(stop)]
    elif isinstance(m, Welcome):
        parts += [
            _U32.pack(m.rank),
            _U32.pack(m.n_ranks),
            _U64.pack(m.n_cells),
            _U64.pack(m.cell_range[0]),
            _U64.pack(m.cell_range[1]),
            _U32.pack(m.n_timesteps),
            _U16.pack(len(m.fields)),
        ]
        parts += [_str(name) for name in m.fields]
    elif isinstance(m, Data):
        if m.value_count == 0:
            raise ValueError("Data message without values")
        parts += [_str(m.field_name), _U32.pack(m.timestep), _U64.pack(m.offset), _U32.pack(m.value_count)]
        parts.append(m.payload.tobytes())
    elif isinstance(m, Heartbeat):
        parts += [_U64.pack(m.sequence), _U64.pack(m.epoch), _U64.pack(m.applied), _F64.pack(m.timestamp)]
    elif isinstance(m, Ack):
        parts += [_U8.pack(m.status), _str(m.detail)]
    elif not isinstance(m, Goodbye):
        raise TypeError(f"not a message: {m!r}")
    body = b"".join(parts)
    if len(body) > MAX_BODY:
        raise ValueError(f"body of {len(body)} bytes exceeds {MAX_BODY}")
    return _HEADER.pack(MAGIC, VERSION, int(m.kind), 0, len(body)) + body


# -- decoding -------------------------------------------------------------------------


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: memoryview) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise MalformedFrameError(f"body ends after {len(self.buf)} bytes, field needs {end}")
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))[0]

    def string(self) -> str:
        n = self.unpack(_U16)
        try:
            return str(self.take(n), "utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrameError(f"invalid UTF-8: {exc}") from None


def parse_header(header: bytes) -> tuple[Kind, int]:
    """Validate a 12-byte header, returning ``(kind, body_length)``."""
    if len(header) < HEADER_SIZE:
        raise TruncatedFrameError(f"header needs {HEADER_SIZE} bytes, got {len(header)}")
    magic, version, kind, reserved, length = _HEADER.unpack(header[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise VersionMismatchError(f"protocol version {version}, expected {VERSION}")
    if length > MAX_BODY:
        raise LengthOverflowError(f"declared body length {length} exceeds {MAX_BODY}")
    if reserved != 0:
        raise MalformedFrameError("reserved header bits set")
    try:
        return Kind(kind), length
    except ValueError:
        raise MalformedFrameError(f"unknown message kind {kind}") from None


def decode_body(kind: Kind, body: bytes | memoryview) -> Message:
    r = _Reader(memoryview(body))
    study_id = r.string()
    sim = r.unpack(_I64)
    if kind is Kind.HELLO:
        n = r.unpack(_U16)
        fields = tuple((r.string(), r.unpack(_U64), r.unpack(_U64)) for _ in range(n))
        msg: Message = Hello(study_id, sim, fields)
    elif kind is Kind.WELCOME:
        rank, n_ranks, n_cells = r.unpack(_U32), r.unpack(_U32), r.unpack(_U64)
        cells = (r.unpack(_U64), r.unpack(_U64))
        steps = r.unpack(_U32)
        n = r.unpack(_U16)
        msg = Welcome(study_id, sim, rank, n_ranks, n_cells, cells, steps, tuple(r.string() for _ in range(n)))
    elif kind is Kind.DATA:
        name = r.string()
        timestep, offset, count = r.unpack(_U32), r.unpack(_U64), r.unpack(_U32)
        if count == 0:
            raise MalformedFrameError("Data frame with zero values")
        raw = r.take(8 * count)
        msg = Data(study_id, sim, name, timestep, offset, np.frombuffer(raw, dtype="<f8").copy())
    elif kind is Kind.GOODBYE:
        msg = Goodbye(study_id, sim)
    elif kind is Kind.HEARTBEAT:
        msg = Heartbeat(study_id, sim, r.unpack(_U64), r.unpack(_U64), r.unpack(_U64), r.unpack(_F64))
    else:
        msg = Ack(study_id, sim, r.unpack(_U8), r.string())
    if r.pos != len(r.buf):
        raise MalformedFrameError(f"{len(r.buf) - r.pos} trailing bytes in {kind.name} body")
    return msg


def decode_message(frame: bytes | bytearray | memoryview) -> Message:
    """Decode exactly one frame.  Every failure is a :class:`ProtocolError` subclass."""
    frame = memoryview(frame)
    kind, length = parse_header(frame)
    if len(frame) < HEADER_SIZE + length:
        raise TruncatedFrameError(f"frame declares {length} body bytes, {len(frame) - HEADER_SIZE} present")
    if len(frame) > HEADER_SIZE + length:
        raise MalformedFrameError("bytes after end of frame")
    return decode_body(kind, frame[HEADER_SIZE:])


class FrameBuffer:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER_SIZE:
            kind, length = parse_header(self._buf)
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                break
            out.append(decode_body(kind, bytes(self._buf[HEADER_SIZE:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- socket transport ------------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionResetError("peer closed the connection mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> Message | None:
    """Read one frame from a blocking socket; ``None`` on clean EOF at a frame boundary."""
    first = sock.recv(HEADER_SIZE)
    if not first:
        return None
    header = first + _recv_exact(sock, HEADER_SIZE - len(first)) if len(first) < HEADER_SIZE else first
    kind, length = parse_header(header)
    return decode_body(kind, _recv_exact(sock, length))


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


__all__ = [
    "Ack",
    "Data",
    "FrameBuffer",
    "Goodbye",
    "Heartbeat",
    "Hello",
    "Kind",
    "Message",
    "PartitionMap",
    "ProtocolError",
    "Welcome",
    "build_partition_map",
    "decode_message",
    "encode_message",
    "recv_message",
    "route",
    "send_message",
]
