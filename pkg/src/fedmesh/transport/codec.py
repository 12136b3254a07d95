"""Wire format.

Frame: ``u32 BE length`` (of type byte + payload), ``u8 msg_type``, payload.
Header integers are big-endian; parameter floats are IEEE-754 float32
little-endian. The mix is deliberate and pinned by tests.
"""
from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from fedmesh.model import DecodeError, ParamVector, _Reader, read_params, serialize_params
from fedmesh.protocol import ClientUpdate

DEFAULT_MAX_FRAME = 64 * 1024 * 1024
_LEN = struct.Struct(">I")
_UPDATE_HEADER = struct.Struct(">IIIfI")


class MsgType(enum.IntEnum):
    GLOBAL_BROADCAST = 0x01
    CLIENT_UPDATE = 0x02
    ACK = 0x03
    ERROR = 0x04
    ROUND_COMPLETE = 0x05
    JOIN = 0x06


class FrameError(ValueError):
    pass


class UnknownMessageType(FrameError):
    def __init__(self, msg_type):
        super().__init__(f"unknown message type 0x{msg_type:02x}")
        self.msg_type = msg_type


class FrameTooLarge(ConnectionError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes = b""


def encode_frame(frame, max_frame_size=DEFAULT_MAX_FRAME):
    length = 1 + len(frame.payload)
    if length > max_frame_size:
        raise FrameTooLarge(f"frame of {length} bytes exceeds the {max_frame_size}-byte limit")
    return _LEN.pack(length) + bytes([int(frame.msg_type)]) + frame.payload


class FrameDecoder:
    """Incremental decoder; accepts arbitrary write boundaries.

    An unknown message type raises UnknownMessageType after its bytes are
    consumed, so decoding can continue with the next frame.
    """

    def __init__(self, max_frame_size=DEFAULT_MAX_FRAME):
        self.max_frame_size = max_frame_size
        self._buf = bytearray()

    def feed(self, data):
        self._buf += data

    @property
    def buffered(self):
        return len(self._buf)

    def next_frame(self):
        if len(self._buf) < 4:
            return None
        (length,) = _LEN.unpack_from(self._buf)
        if length < 1:
            raise FrameError("zero-length frame")
        if length > self.max_frame_size:
            raise FrameTooLarge(f"declared frame length {length} exceeds the {self.max_frame_size}-byte limit")
        if len(self._buf) < 4 + length:
            return None
        msg_type = self._buf[4]
        payload = bytes(self._buf[5:4 + length])
        del self._buf[:4 + length]
        if msg_type not in MsgType._value2member_map_:
            raise UnknownMessageType(msg_type)
        return Frame(MsgType(msg_type), payload)


def decode_frames(data, max_frame_size=DEFAULT_MAX_FRAME):
    dec = FrameDecoder(max_frame_size)
    dec.feed(data)
    out = []
    while (frame := dec.next_frame()) is not None:
        out.append(frame)
    if dec.buffered:
        raise FrameError(f"{dec.buffered} trailing bytes do not form a frame")
    return out


def checksum(payload):
    return zlib.crc32(payload) & 0xFFFFFFFF


# --- messages ------------------------------------------------------------------

def encode_client_update(update):
    values = np.asarray(update.params.values, dtype="<f4")
    head = _UPDATE_HEADER.pack(update.client_id, update.round, update.num_samples,
                               update.local_loss, values.size)
    return head + values.tobytes()


def decode_client_update(payload, layout=None):
    if len(payload) < _UPDATE_HEADER.size:
        raise DecodeError(f"client update needs {_UPDATE_HEADER.size} header bytes, got {len(payload)}")
    client_id, rnd, num_samples, loss, count = _UPDATE_HEADER.unpack_from(payload)
    expected = _UPDATE_HEADER.size + 4 * count
    if len(payload) != expected:
        raise DecodeError(f"client update declares {count} params ({expected} bytes), got {len(payload)} bytes")
    values = np.frombuffer(payload, dtype="<f4", offset=_UPDATE_HEADER.size).astype(np.float32)
    if layout is None:
        layout = (("params", (count,)),)
    return ClientUpdate(client_id, rnd, ParamVector(values, layout), num_samples, loss)


@dataclass(frozen=True)
class GlobalBroadcast:
    round: int
    total_rounds: int
    params: ParamVector


@dataclass(frozen=True)
class Ack:
    seq: int
    checksum: int


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    reason: str


@dataclass(frozen=True)
class RoundComplete:
    round: int
    final: bool
    params: ParamVector


@dataclass(frozen=True)
class Join:
    client_id: int
    num_samples: int


class ErrorCode(enum.IntEnum):
    DUPLICATE_CLIENT = 1
    UNKNOWN_CLIENT = 2
    DECODE_FAILED = 3
    REFUSED = 4
    ABORTED = 5


def encode_message(msg):
    if isinstance(msg, ClientUpdate):
        return Frame(MsgType.CLIENT_UPDATE, encode_client_update(msg))
    if isinstance(msg, GlobalBroadcast):
        return Frame(MsgType.GLOBAL_BROADCAST,
                     struct.pack(">II", msg.round, msg.total_rounds) + serialize_params(msg.params))
    if isinstance(msg, Ack):
        return Frame(MsgType.ACK, struct.pack(">II", msg.seq, msg.checksum))
    if isinstance(msg, ErrorMessage):
        return Frame(MsgType.ERROR, struct.pack(">H", msg.code) + msg.reason.encode("utf-8"))
    if isinstance(msg, RoundComplete):
        return Frame(MsgType.ROUND_COMPLETE,
                     struct.pack(">IB", msg.round, int(msg.final)) + serialize_params(msg.params))
    if isinstance(msg, Join):
        return Frame(MsgType.JOIN, struct.pack(">II", msg.client_id, msg.num_samples))
    raise TypeError(f"no wire encoding for {type(msg).__name__}")


def _exact(reader, what):
    if reader.pos != len(reader.data):
        raise DecodeError(f"{what}: {len(reader.data) - reader.pos} unexpected trailing bytes")


def decode_message(frame, layout=None):
    t, payload = frame.msg_type, frame.payload
    if t == MsgType.CLIENT_UPDATE:
        return decode_client_update(payload, layout)
    reader = _Reader(payload)
    if t == MsgType.GLOBAL_BROADCAST:
        rnd, total = reader.unpack(">II", "broadcast header")
        params = read_params(reader)
        _exact(reader, "broadcast")
        return GlobalBroadcast(rnd, total, params)
    if t == MsgType.ACK:
        seq, crc = reader.unpack(">II", "ack")
        _exact(reader, "ack")
        return Ack(seq, crc)
    if t == MsgType.ERROR:
        (code,) = reader.unpack(">H", "error code")
        return ErrorMessage(code, bytes(reader.data[reader.pos:]).decode("utf-8", errors="replace"))
    if t == MsgType.ROUND_COMPLETE:
        rnd, final = reader.unpack(">IB", "round-complete header")
        params = read_params(reader)
        _exact(reader, "round-complete")
        return RoundComplete(rnd, bool(final), params)
    if t == MsgType.JOIN:
        cid, n = reader.unpack(">II", "join")
        _exact(reader, "join")
        return Join(cid, n)
    raise UnknownMessageType(int(t))
