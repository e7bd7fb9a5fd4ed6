"""Non-volatile circular FIFO of flash records.

Persistence file layout: an 8-byte header ``tail u32 | head u32`` (absolute
write counters, little-endian) followed by ``capacity`` 16-byte record slots.
A counter maps to slot ``counter % capacity``; the number of stored records
is ``head - tail``.
"""
from __future__ import annotations

import mmap
import os
import struct

import numpy as np

from ..errors import InvalidInput, NotRetained
from .records import ID_MODULUS, RECORD_DTYPE, RECORD_SIZE, FlashRecord, encode_record

DEFAULT_CAPACITY_BYTES = 8 * 1024 * 1024
HEADER = struct.Struct("<II")
COUNTER_MOD = 1 << 32


class FlashFifo:
    def __init__(self, path=None, capacity_bytes: int = DEFAULT_CAPACITY_BYTES):
        if capacity_bytes <= 0 or capacity_bytes % RECORD_SIZE:
            raise InvalidInput("capacity_bytes must be a positive multiple of 16")
        self.capacity_bytes = capacity_bytes
        self.capacity = capacity_bytes // RECORD_SIZE
        if COUNTER_MOD % self.capacity:
            raise InvalidInput("record capacity must divide 2**32")
        self.path = path
        size = HEADER.size + capacity_bytes
        self._fh = None
        if path is None:
            self._buf = bytearray(size)
        else:
            exists = os.path.exists(path)
            self._fh = open(path, "r+b" if exists else "w+b")
            if not exists:
                self._fh.truncate(size)
            elif os.path.getsize(path) != size:
                self._fh.close()
                raise InvalidInput(f"{path}: size mismatch for capacity {capacity_bytes}")
            self._buf = mmap.mmap(self._fh.fileno(), size)
        self._slots = np.ndarray((self.capacity,), dtype=RECORD_DTYPE, buffer=self._buf,
                                 offset=HEADER.size)
        self._tail, self._head = HEADER.unpack_from(self._buf, 0)

    # -- bookkeeping
    def __len__(self) -> int:
        return (self._head - self._tail) % COUNTER_MOD

    @property
    def head(self) -> int:
        return self._head

    @property
    def tail(self) -> int:
        return self._tail

    def _write_header(self):
        HEADER.pack_into(self._buf, 0, self._tail, self._head)

    def flush(self):
        if isinstance(self._buf, mmap.mmap):
            self._buf.flush()

    def close(self):
        if self._fh is not None:
            self._slots = None
            self._buf.flush()
            self._buf.close()
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- data path
    def append(self, rec: FlashRecord) -> None:
        slot = self._head % self.capacity
        off = HEADER.size + slot * RECORD_SIZE
        self._buf[off:off + RECORD_SIZE] = encode_record(rec)
        self._head = (self._head + 1) % COUNTER_MOD
        if len(self) > self.capacity:
            self._tail = (self._tail + 1) % COUNTER_MOD
        self._write_header()

    def raw_bytes(self) -> bytes:
        """Persisted image: header plus every slot."""
        return bytes(self._buf)

    def _newest_first(self):
        n = len(self)
        counters = (self._head - 1 - np.arange(n, dtype=np.int64)) % COUNTER_MOD
        return self._slots[counters % self.capacity]

    def _addressable(self):
        """Newest-first rows and their wrap-aware age in minutes, limited to one id span."""
        rows = self._newest_first()
        if rows.size == 0:
            return rows, np.zeros(0, dtype=np.int64)
        ids = rows["rec_id"].astype(np.int64)
        steps = (ids[:-1] - ids[1:]) % ID_MODULUS
        age = np.concatenate([[0], np.cumsum(steps)])
        keep = age < ID_MODULUS
        # age is non-decreasing, so the addressable part is a prefix
        k = int(np.count_nonzero(keep))
        return rows[:k], age[:k]

    def available_range(self):
        rows, _ = self._addressable()
        if rows.size == 0:
            return None
        return int(rows[-1]["rec_id"]), int(rows[0]["rec_id"])

    def latest_id(self):
        if len(self) == 0:
            return None
        return int(self._slots[(self._head - 1) % self.capacity]["rec_id"])

    def records(self) -> list[FlashRecord]:
        """Every stored record, oldest first (ids may repeat after a wrap)."""
        rows = self._newest_first()[::-1]
        return [FlashRecord(int(r["rec_type"]), int(r["rec_id"]), r["v1"], r["v2"], r["v3"]) for r in rows]

    def read_range(self, from_id: int, to_id: int) -> list[FlashRecord]:
        """Records with ids in [from_id, to_id] (wrap-aware, inclusive), oldest first."""
        rows, age = self._addressable()
        if rows.size == 0:
            raise NotRetained("flash is empty", None)
        latest = int(rows[0]["rec_id"])
        oldest = int(rows[-1]["rec_id"])
        age_from = (latest - from_id) % ID_MODULUS
        age_to = (latest - to_id) % ID_MODULUS
        if age_from > age[-1] or age_to > age[-1]:
            raise NotRetained(f"ids {from_id}..{to_id} not retained; available {oldest}..{latest}",
                              (oldest, latest))
        if age_to > age_from:
            raise InvalidInput(f"from_id {from_id} is newer than to_id {to_id}")
        sel = rows[(age >= age_to) & (age <= age_from)][::-1]
        return [FlashRecord(int(r["rec_type"]), int(r["rec_id"]), r["v1"], r["v2"], r["v3"]) for r in sel]
