"""16-byte flash record codec.

Layout (little-endian): rec_type u16 | rec_id u16 | v1 f32 | v2 f32 | v3 f32.
Decoded floats are kept as ``numpy.float32`` so NaN payloads survive a
round trip bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import RecordLengthError

RECORD_SIZE = 16
ID_MODULUS = 1 << 16
RECORD_DTYPE = np.dtype([("rec_type", "<u2"), ("rec_id", "<u2"),
                         ("v1", "<f4"), ("v2", "<f4"), ("v3", "<f4")])
assert RECORD_DTYPE.itemsize == RECORD_SIZE

TYPE_MINUTE_AVERAGE = 1


@dataclass(frozen=True)
class FlashRecord:
    rec_type: int
    rec_id: int
    v1: float  # gain-normalized alcohol signal, counts at the reference gain
    v2: float  # temperature, C
    v3: float  # relative humidity, %

    def as_tuple(self):
        return (self.rec_type, self.rec_id, self.v1, self.v2, self.v3)


def encode_record(rec: FlashRecord) -> bytes:
    if not (0 <= rec.rec_type < ID_MODULUS and 0 <= rec.rec_id < ID_MODULUS):
        raise ValueError("rec_type and rec_id must fit in 2 bytes")
    return np.array([rec.as_tuple()], dtype=RECORD_DTYPE).tobytes()


def decode_record(data: bytes) -> FlashRecord:
    if len(data) != RECORD_SIZE:
        raise RecordLengthError(f"record must be {RECORD_SIZE} bytes, got {len(data)}")
    row = np.frombuffer(bytes(data), dtype=RECORD_DTYPE)[0]
    return FlashRecord(int(row["rec_type"]), int(row["rec_id"]), row["v1"], row["v2"], row["v3"])


def decode_records(data: bytes) -> list[FlashRecord]:
    if len(data) % RECORD_SIZE:
        raise RecordLengthError(f"record array length {len(data)} is not a multiple of {RECORD_SIZE}")
    rows = np.frombuffer(bytes(data), dtype=RECORD_DTYPE)
    return [FlashRecord(int(r["rec_type"]), int(r["rec_id"]), r["v1"], r["v2"], r["v3"]) for r in rows]


def id_distance(newer: int, older: int) -> int:
    """Wrap-aware number of minutes from `older` to `newer`."""
    return (newer - older) % ID_MODULUS
