"""Framed request/response protocol carried over a 20-byte MTU byte stream.

Every frame is ``opcode u8 | seq u8 | length u8 | payload[length]`` with
``length <= 17``. Integers inside payloads are little-endian. The full
bit-level description lives in docs/protocol.md.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from ..errors import ProtocolError

MTU = 20
HEADER_SIZE = 3
MAX_PAYLOAD = MTU - HEADER_SIZE

# requests
GET_INFO = 0x01
SUBSCRIBE = 0x02
UNSUBSCRIBE = 0x03
FLASH_READ = 0x04
SET_TIME_REF = 0x05
# responses / notifications
ACK = 0x80
INFO = 0x81
DUMP_BEGIN = 0x82
DUMP_DATA = 0x83
DUMP_END = 0x84
MEASUREMENT = 0x90
NAK = 0xFF

REQUEST_PAYLOAD_SIZES = {GET_INFO: 0, SUBSCRIBE: 0, UNSUBSCRIBE: 0, FLASH_READ: 4, SET_TIME_REF: 8}

# NAK error codes
ERR_UNKNOWN_OPCODE = 1
ERR_BAD_LENGTH = 2
ERR_NOT_RETAINED = 3
ERR_BAD_RANGE = 4

FIRMWARE_VERSION = (1, 0)

_INFO_FIXED = struct.Struct("<HBBHHIB")  # total_len, fw major, fw minor, latest, oldest, count, flags
_RANGE = struct.Struct("<HH")
_DUMP_BEGIN = struct.Struct("<HHI")
_DUMP_END = struct.Struct("<IIH")  # crc32, record count, reserved
_MEAS = struct.Struct("<fff")
_NAK = struct.Struct("<BBBHH")  # opcode, error, has_range, oldest, latest


@dataclass(frozen=True)
class Frame:
    opcode: int
    seq: int = 0
    payload: bytes = b""

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise ProtocolError(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        if not (0 <= self.opcode <= 0xFF and 0 <= self.seq <= 0xFF):
            raise ProtocolError("opcode and seq must fit in one byte")

    def encode(self) -> bytes:
        return bytes((self.opcode, self.seq, len(self.payload))) + self.payload


class FrameDecoder:
    """Incremental splitter for an ordered byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()
        # (opcode, seq, declared_length) of headers that broke framing
        self.malformed: list[tuple[int, int, int]] = []

    def feed(self, data: bytes) -> list[Frame]:
        """Frames completed by `data`; a bad length header drops the buffered bytes."""
        self._buf += data
        frames = []
        while len(self._buf) >= HEADER_SIZE:
            opcode, seq, length = self._buf[0], self._buf[1], self._buf[2]
            if length > MAX_PAYLOAD:
                self.malformed.append((opcode, seq, length))
                self._buf.clear()
                break
            if len(self._buf) < HEADER_SIZE + length:
                break
            payload = bytes(self._buf[HEADER_SIZE:HEADER_SIZE + length])
            del self._buf[:HEADER_SIZE + length]
            frames.append(Frame(opcode, seq, payload))
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


def segment(opcode: int, message: bytes, seq_start: int = 0) -> list[Frame]:
    """Split a message into consecutive-seq frames of at most 17 bytes each."""
    chunks = [message[i:i + MAX_PAYLOAD] for i in range(0, len(message), MAX_PAYLOAD)] or [b""]
    return [Frame(opcode, (seq_start + k) & 0xFF, c) for k, c in enumerate(chunks)]


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class DeviceInfo:
    name: str
    fw_version: tuple
    latest_id: int | None
    oldest_id: int | None
    record_count: int


def info_frames(info: DeviceInfo) -> list[Frame]:
    """INFO is a multi-frame message whose first two bytes give its total length."""
    name = info.name.encode("utf-8")[:255]
    has = info.latest_id is not None
    body = _INFO_FIXED.pack(0, info.fw_version[0], info.fw_version[1],
                            info.latest_id if has else 0, info.oldest_id if has else 0,
                            info.record_count, 1 if has else 0)
    body += bytes((len(name),)) + name
    body = struct.pack("<H", len(body)) + body[2:]
    return segment(INFO, body)


def parse_info(message: bytes) -> DeviceInfo:
    total, major, minor, latest, oldest, count, flags = _INFO_FIXED.unpack_from(message, 0)
    if total != len(message):
        raise ProtocolError(f"INFO length {len(message)} != declared {total}")
    n = message[_INFO_FIXED.size]
    name = message[_INFO_FIXED.size + 1:_INFO_FIXED.size + 1 + n].decode("utf-8")
    has = bool(flags & 1)
    return DeviceInfo(name, (major, minor), latest if has else None, oldest if has else None, count)


class InfoAssembler:
    """Collects INFO frames until the declared length is reached."""

    def __init__(self):
        self._buf = bytearray()
        self._next_seq = 0

    def add(self, frame: Frame) -> DeviceInfo | None:
        if frame.seq != self._next_seq:
            self._buf.clear()
            self._next_seq = 0
            if frame.seq != 0:
                raise ProtocolError(f"INFO frame out of order (seq {frame.seq})")
        self._buf += frame.payload
        self._next_seq = (frame.seq + 1) & 0xFF
        if len(self._buf) >= 2 and len(self._buf) >= struct.unpack_from("<H", self._buf)[0]:
            msg = bytes(self._buf)
            self._buf.clear()
            self._next_seq = 0
            return parse_info(msg)
        return None


def flash_read_frame(from_id: int, to_id: int, seq: int = 0) -> Frame:
    return Frame(FLASH_READ, seq, _RANGE.pack(from_id, to_id))


def parse_range(payload: bytes) -> tuple[int, int]:
    return _RANGE.unpack(payload)


def dump_frames(from_id: int, to_id: int, record_bytes: list[bytes]) -> list[Frame]:
    """DUMP_BEGIN, one DUMP_DATA per 16-byte record, DUMP_END with CRC32."""
    frames = [Frame(DUMP_BEGIN, 0, _DUMP_BEGIN.pack(from_id, to_id, len(record_bytes)))]
    crc = 0
    for k, rb in enumerate(record_bytes):
        crc = zlib.crc32(rb, crc)
        frames.append(Frame(DUMP_DATA, k & 0xFF, rb))
    frames.append(Frame(DUMP_END, len(record_bytes) & 0xFF, _DUMP_END.pack(crc, len(record_bytes), 0)))
    return frames


def parse_dump_begin(payload: bytes) -> tuple[int, int, int]:
    return _DUMP_BEGIN.unpack(payload)


def parse_dump_end(payload: bytes) -> tuple[int, int]:
    crc, count, _ = _DUMP_END.unpack(payload)
    return crc, count


def measurement_frame(seq: int, alcohol: float, temp_C: float, rh_pct: float) -> Frame:
    return Frame(MEASUREMENT, seq & 0xFF, _MEAS.pack(alcohol, temp_C, rh_pct))


def parse_measurement(payload: bytes) -> tuple[float, float, float]:
    return _MEAS.unpack(payload)


def ack_frame(request_opcode: int, seq: int) -> Frame:
    return Frame(ACK, seq, bytes((request_opcode,)))


def nak_frame(request_opcode: int, error: int, seq: int = 0, available=None) -> Frame:
    lo, hi = available if available is not None else (0, 0)
    return Frame(NAK, seq, _NAK.pack(request_opcode, error, available is not None, lo, hi))


def parse_nak(payload: bytes):
    opcode, error, has_range, lo, hi = _NAK.unpack(payload)
    available = (lo, hi) if has_range else None
    return opcode, error, available
