"""Length-prefixed binary protocol between host servers and RL agents.

Frame layout (all integers big-endian):

    u32  frame length (bytes that follow)
    u8   version
    u8   kind            HELLO=1 STATS=2 PARAMS=3 ACK=4 ERROR=5
    u32  agent id
    u64  epoch
    u32  payload length
    ...  payload, kind-specific

STATS carries a flow-id list plus a row-major float64 feature matrix;
PARAMS carries the two filter windows (milliseconds / rounds, both u32).
Decoding never guesses: any truncation, length mismatch, unknown kind or
unsupported version raises a typed error naming the fault.
"""

from __future__ import annotations

import socket
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

VERSION = 1

_HEADER = struct.Struct("!BBIQI")
_LEN = struct.Struct("!I")


class MsgKind(IntEnum):
    HELLO = 1
    STATS = 2
    PARAMS = 3
    ACK = 4
    ERROR = 5


class WireCodecError(Exception):
    fault = "codec"


class TruncatedFrameError(WireCodecError):
    fault = "truncated"


class UnsupportedVersionError(WireCodecError):
    fault = "unsupported version"


class LengthMismatchError(WireCodecError):
    fault = "length mismatch"


class UnknownKindError(WireCodecError):
    fault = "unknown kind"


class PayloadError(WireCodecError):
    fault = "bad payload"


@dataclass(frozen=True)
class Hello:
    t1_ms: int
    t2_ms: int
    flow_ids: tuple[int, ...]


@dataclass
class Stats:
    flow_ids: tuple[int, ...]
    features: np.ndarray  # (n_flows, n_features) float64

    def __eq__(self, other):
        return (isinstance(other, Stats)
                and self.flow_ids == other.flow_ids
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass(frozen=True)
class Params:
    w_rt_ms: int
    w_bw_rounds: int


@dataclass(frozen=True)
class Ack:
    pass


@dataclass(frozen=True)
class Error:
    code: int
    message: str


@dataclass
class WireMessage:
    kind: MsgKind
    agent_id: int
    epoch: int
    body: object
    version: int = VERSION


def _encode_payload(msg: WireMessage) -> bytes:
    body = msg.body
    if msg.kind is MsgKind.HELLO:
        return struct.pack("!III", body.t1_ms, body.t2_ms, len(body.flow_ids)) + \
            struct.pack(f"!{len(body.flow_ids)}I", *body.flow_ids)
    if msg.kind is MsgKind.STATS:
        feats = np.ascontiguousarray(body.features, dtype=np.float64)
        n, c = feats.shape
        if n != len(body.flow_ids):
            raise PayloadError("flow id list does not match matrix rows")
        head = struct.pack("!II", n, c)
        ids = struct.pack(f"!{n}I", *body.flow_ids)
        return head + ids + feats.astype(">f8").tobytes()
    if msg.kind is MsgKind.PARAMS:
        return struct.pack("!II", body.w_rt_ms, body.w_bw_rounds)
    if msg.kind is MsgKind.ACK:
        return b""
    if msg.kind is MsgKind.ERROR:
        raw = body.message.encode("utf-8")
        return struct.pack("!II", body.code, len(raw)) + raw
    raise UnknownKindError(f"cannot encode kind {msg.kind}")


def _decode_payload(kind: MsgKind, payload: bytes):
    try:
        if kind is MsgKind.HELLO:
            t1, t2, n = struct.unpack_from("!III", payload, 0)
            ids = struct.unpack_from(f"!{n}I", payload, 12)
            if len(payload) != 12 + 4 * n:
                raise LengthMismatchError("hello payload length mismatch")
            return Hello(t1, t2, ids)
        if kind is MsgKind.STATS:
            n, c = struct.unpack_from("!II", payload, 0)
            ids = struct.unpack_from(f"!{n}I", payload, 8)
            expect = 8 + 4 * n + 8 * n * c
            if len(payload) != expect:
                raise LengthMismatchError(
                    f"stats payload is {len(payload)} bytes, expected {expect}")
            mat = np.frombuffer(payload, dtype=">f8", count=n * c, offset=8 + 4 * n)
            return Stats(ids, mat.astype(np.float64).reshape(n, c))
        if kind is MsgKind.PARAMS:
            if len(payload) != 8:
                raise LengthMismatchError("params payload must be 8 bytes")
            w_rt, w_bw = struct.unpack("!II", payload)
            return Params(w_rt, w_bw)
        if kind is MsgKind.ACK:
            if payload:
                raise LengthMismatchError("ack carries no payload")
            return Ack()
        if kind is MsgKind.ERROR:
            code, ln = struct.unpack_from("!II", payload, 0)
            if len(payload) != 8 + ln:
                raise LengthMismatchError("error payload length mismatch")
            try:
                text = payload[8:].decode("utf-8")
            except UnicodeDecodeError as exc:
                raise PayloadError(f"error message is not valid utf-8: {exc}") from exc
            return Error(code, text)
    except struct.error as exc:
        raise TruncatedFrameError(f"payload too short for {kind.name}: {exc}") from exc
    raise UnknownKindError(f"cannot decode kind {kind}")


def encode_msg(msg: WireMessage) -> bytes:
    payload = _encode_payload(msg)
    header = _HEADER.pack(msg.version, int(msg.kind), msg.agent_id, msg.epoch, len(payload))
    body = header + payload
    return _LEN.pack(len(body)) + body


def decode_msg(frame: bytes) -> WireMessage:
    if len(frame) < _LEN.size:
        raise TruncatedFrameError("frame shorter than length prefix")
    (length,) = _LEN.unpack_from(frame, 0)
    if len(frame) - _LEN.size != length:
        raise (TruncatedFrameError if len(frame) - _LEN.size < length
               else LengthMismatchError)(
            f"frame body is {len(frame) - _LEN.size} bytes, prefix says {length}")
    body = frame[_LEN.size:]
    if len(body) < _HEADER.size:
        raise TruncatedFrameError("frame body shorter than header")
    version, kind_raw, agent_id, epoch, payload_len = _HEADER.unpack_from(body, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    try:
        kind = MsgKind(kind_raw)
    except ValueError as exc:
        raise UnknownKindError(f"unknown kind {kind_raw}") from exc
    payload = body[_HEADER.size:]
    if len(payload) != payload_len:
        raise LengthMismatchError(
            f"payload is {len(payload)} bytes, header says {payload_len}")
    return WireMessage(kind=kind, agent_id=agent_id, epoch=epoch,
                       body=_decode_payload(kind, payload), version=version)


# ---------------------------------------------------------------------------
# transports: identical frames over an in-memory pair or a TCP socket


class MemEndpoint:
    def __init__(self, out_queue: deque, in_queue: deque):
        self._out = out_queue
        self._in = in_queue

    def send(self, frame: bytes) -> None:
        self._out.append(frame)

    def recv(self) -> bytes:
        if not self._in:
            raise TruncatedFrameError("no frame available on in-memory channel")
        return self._in.popleft()

    def close(self) -> None:
        pass


@dataclass
class MemChannel:
    """Deterministic in-process duplex channel (default transport)."""

    _ab: deque = field(default_factory=deque)
    _ba: deque = field(default_factory=deque)

    @property
    def a(self) -> MemEndpoint:
        return MemEndpoint(self._ab, self._ba)

    @property
    def b(self) -> MemEndpoint:
        return MemEndpoint(self._ba, self._ab)


class SocketEndpoint:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send(self, frame: bytes) -> None:
        self._sock.sendall(frame)

    def recv(self) -> bytes:
        head = self._read_exact(_LEN.size)
        (length,) = _LEN.unpack(head)
        return head + self._read_exact(length)

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                raise TruncatedFrameError("socket closed mid-frame")
            buf += chunk
        return buf

    def close(self) -> None:
        self._sock.close()


class TcpChannel:
    """Loopback TCP pair carrying the same frames as MemChannel.

    The protocol is strictly request/response with small frames, so a
    single-process pair never deadlocks on kernel buffers.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(1)
        client = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        client.connect(server.getsockname())
        accepted, _ = server.accept()
        server.close()
        self.a = SocketEndpoint(client)
        self.b = SocketEndpoint(accepted)

    def close(self) -> None:
        self.a.close()
        self.b.close()


def make_channel(transport: str):
    if transport == "mem":
        return MemChannel()
    if transport == "tcp":
        return TcpChannel()
    raise ValueError(f"unknown transport {transport!r} (use 'mem' or 'tcp')")
