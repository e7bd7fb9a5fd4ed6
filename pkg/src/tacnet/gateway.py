"""Headless gateway: discovery, 1 Hz streaming, flash backfill, store-and-forward.

Every point is appended to a local CSV and to an NDJSON spool before any
upload attempt, so the local copy is always a superset of what the service
holds. The spool is replayed in order until the service acknowledges it.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from .device import protocol as P
from .device.records import ID_MODULUS, decode_record
from .errors import IntegrityError, InvalidInput, NotRetained, ProtocolError, ServiceUnavailable

log = logging.getLogger(__name__)

MINUTE_NS = 60 * 10**9
# wrap-aware subtraction is only trusted over half the 16-bit id space
BACKFILL_WINDOW = ID_MODULUS // 2
LOCAL_CSV_HEADER = ("t_ns", "device", "alcohol_raw", "temp_c", "rh_pct", "source")


class SystemClock:
    """Wall clock with the `now_ns()` surface of `VirtualClock`."""

    def now_ns(self) -> int:
        return time.time_ns()


@dataclass(frozen=True)
class DeviceDescriptor:
    device_name: str
    transport_address: str
    latest_rec_id: int | None


@dataclass(frozen=True)
class TimestampedPoint:
    t_unix_ns: int
    device_id: str
    alcohol_raw: float
    temp_C: float
    rh_pct: float
    source: str  # "realtime" | "backfill"

    def as_json(self) -> dict:
        return {"t_ns": self.t_unix_ns, "alcohol_raw": self.alcohol_raw, "temp_c": self.temp_C,
                "rh_pct": self.rh_pct, "source": self.source}


def to_json_points(batch: Iterable[TimestampedPoint]) -> str:
    """Service write payload for a single-device, single-source batch."""
    batch = list(batch)
    if not batch:
        raise InvalidInput("empty batch")
    devices = {p.device_id for p in batch}
    sources = {p.source for p in batch}
    if len(devices) != 1:
        raise InvalidInput(f"batch mixes devices {sorted(devices)}")
    if len(sources) != 1:
        raise InvalidInput(f"batch mixes sources {sorted(sources)}")
    doc = {"device": batch[0].device_id, "points": [p.as_json() for p in batch]}
    return json.dumps(doc, separators=(",", ":"))


def backfill_timestamp(now_ns: int, latest_id: int, rec_id: int) -> int:
    """Wall time of a record: now minus one minute per id behind the latest."""
    return now_ns - MINUTE_NS * ((latest_id - rec_id) % ID_MODULUS)


# ---------------------------------------------------------------- store and forward

class Uploader:
    """Ordered per-device upload queue backed by a local CSV and an NDJSON spool."""

    def __init__(self, device_id: str, client, spool_dir, batch_size: int = 600):
        self.device_id = device_id
        self.client = client
        self.batch_size = batch_size
        os.makedirs(spool_dir, exist_ok=True)
        self.csv_path = os.path.join(spool_dir, f"{device_id}.csv")
        self.spool_path = os.path.join(spool_dir, f"{device_id}.spool.ndjson")
        self.pending: deque[TimestampedPoint] = deque()
        self.sent = 0
        self.failures = 0
        if os.path.exists(self.spool_path):
            with open(self.spool_path) as fh:
                for line in fh:
                    if line.strip():
                        d = json.loads(line)
                        self.pending.append(TimestampedPoint(d["t_ns"], device_id, d["alcohol_raw"],
                                                             d["temp_c"], d["rh_pct"], d["source"]))
            if self.pending:
                log.info("%s: replaying %d spooled points", device_id, len(self.pending))
        new_csv = not os.path.exists(self.csv_path)
        self._csv_fh = open(self.csv_path, "a", newline="")
        self._csv = csv.writer(self._csv_fh, lineterminator="\n")
        if new_csv:
            self._csv.writerow(LOCAL_CSV_HEADER)
        self._spool_fh = open(self.spool_path, "a")

    def submit(self, points: Iterable[TimestampedPoint]) -> None:
        points = list(points)
        if not points:
            return
        for p in points:
            self._csv.writerow([p.t_unix_ns, p.device_id, repr(p.alcohol_raw), repr(p.temp_C),
                                repr(p.rh_pct), p.source])
            self._spool_fh.write(json.dumps(p.as_json(), separators=(",", ":")) + "\n")
        self._csv_fh.flush()
        self._spool_fh.flush()
        self.pending.extend(points)

    def _next_batch(self):
        first = self.pending[0]
        batch = []
        for p in self.pending:
            if p.source != first.source or len(batch) >= self.batch_size:
                break
            batch.append(p)
        return batch

    def flush(self) -> bool:
        """Send spooled points in order; False if the service is unreachable."""
        sent_any = False
        try:
            while self.pending:
                batch = self._next_batch()
                self.client.write(to_json_points(batch).encode())
                for _ in batch:
                    self.pending.popleft()
                self.sent += len(batch)
                sent_any = True
        except ServiceUnavailable as exc:
            self.failures += 1
            log.info("%s: service unavailable (%s); %d points spooled", self.device_id, exc,
                     len(self.pending))
            return False
        finally:
            if sent_any:
                self._rewrite_spool()
        return True

    def _rewrite_spool(self):
        self._spool_fh.close()
        tmp = self.spool_path + ".tmp"
        with open(tmp, "w") as fh:
            for p in self.pending:
                fh.write(json.dumps(p.as_json(), separators=(",", ":")) + "\n")
        os.replace(tmp, self.spool_path)
        self._spool_fh = open(self.spool_path, "a")

    def close(self):
        self._csv_fh.close()
        self._spool_fh.close()


# ---------------------------------------------------------------- device session

@dataclass
class BackfillResult:
    points: list[TimestampedPoint]
    latest_id: int | None
    skipped: int = 0
    # (first_missing_id, last_missing_id) spans inside or before the window
    gaps: list[tuple[int, int]] = field(default_factory=list)


class DeviceSession:
    """Gateway-side state for one connected device."""

    def __init__(self, transport, device_name: str, clock, uploader: Uploader | None = None,
                 state_dir=None, timeout_s: float = 5.0):
        self.transport = transport
        self.device_name = device_name
        self.clock = clock
        self.uploader = uploader
        self.timeout_s = timeout_s
        self.state_path = os.path.join(state_dir, f"{device_name}.state.json") if state_dir else None
        self.realtime_received = 0
        self.lost_pushes = 0
        self.disconnected = False
        self._decoder = P.FrameDecoder()
        self._info_asm = P.InfoAssembler()
        self._info: P.DeviceInfo | None = None
        self._acks: list[int] = []
        self._naks: list[tuple] = []
        self._dump = None
        self._dump_done = None
        self._new_points: list[TimestampedPoint] = []
        self._last_rt_ns = None
        self._push_seq = None
        self._state = self._load_state()

    # -- persisted backfill high-water mark
    def _load_state(self):
        if self.state_path and os.path.exists(self.state_path):
            with open(self.state_path) as fh:
                return json.load(fh)
        return {}

    def _save_state(self):
        if not self.state_path:
            return
        tmp = self.state_path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self._state, fh)
        os.replace(tmp, self.state_path)

    @property
    def last_backfilled_id(self):
        return self._state.get("last_backfilled_id")

    # -- frame intake
    def _on_frame(self, f: P.Frame):
        op = f.opcode
        if op == P.MEASUREMENT:
            if self._push_seq is not None and f.seq != (self._push_seq + 1) & 0xFF:
                self.lost_pushes += (f.seq - self._push_seq - 1) & 0xFF
            self._push_seq = f.seq
            alcohol, temp, rh = P.parse_measurement(f.payload)
            t = self.clock.now_ns()
            if self._last_rt_ns is not None and t <= self._last_rt_ns:
                t = self._last_rt_ns + 1
            self._last_rt_ns = t
            pt = TimestampedPoint(t, self.device_name, alcohol, temp, rh, "realtime")
            self.realtime_received += 1
            self._new_points.append(pt)
        elif op == P.ACK:
            self._acks.append(f.payload[0])
        elif op == P.NAK:
            self._naks.append(P.parse_nak(f.payload))
        elif op == P.INFO:
            info = self._info_asm.add(f)
            if info is not None:
                self._info = info
        elif op == P.DUMP_BEGIN:
            lo, hi, count = P.parse_dump_begin(f.payload)
            self._dump = {"range": (lo, hi), "count": count, "data": [], "bad_seq": False}
        elif op == P.DUMP_DATA and self._dump is not None:
            d = self._dump
            if f.seq != len(d["data"]) & 0xFF:
                d["bad_seq"] = True
            d["data"].append(f.payload)
        elif op == P.DUMP_END and self._dump is not None:
            crc, count = P.parse_dump_end(f.payload)
            d, self._dump = self._dump, None
            local_crc = 0
            for chunk in d["data"]:
                local_crc = zlib.crc32(chunk, local_crc)
            ok = (not d["bad_seq"] and count == d["count"] == len(d["data"]) and crc == local_crc
                  and all(len(c) == 16 for c in d["data"]))
            self._dump_done = (ok, d["data"])
        else:
            log.debug("%s: ignoring frame opcode 0x%02x", self.device_name, op)

    def _pump(self, timeout: float = 0.0) -> None:
        data = self.transport.recv(timeout)
        if data:
            for f in self._decoder.feed(data):
                self._on_frame(f)
        if self._decoder.malformed:
            log.warning("%s: malformed frame headers %s", self.device_name, self._decoder.malformed)
            self._decoder.malformed.clear()
        if not self.transport.connected and not self.disconnected:
            self.disconnected = True
            log.info("%s: disconnected", self.device_name)

    def _deliver(self) -> list[TimestampedPoint]:
        pts, self._new_points = self._new_points, []
        if pts and self.uploader is not None:
            self.uploader.submit(pts)
        return pts

    def _await(self, ready, what: str):
        deadline = time.monotonic() + self.timeout_s
        while True:
            self._pump(0.02)
            self._deliver()
            if ready():
                return
            if self.disconnected:
                raise ConnectionError(f"{self.device_name}: disconnected while waiting for {what}")
            if time.monotonic() > deadline:
                raise TimeoutError(f"{self.device_name}: no {what} within {self.timeout_s}s")

    def _request(self, frame: P.Frame):
        self._naks.clear()
        self.transport.send(frame.encode())

    def _expect_ack(self, opcode):
        self._acks.clear()
        self._request(P.Frame(opcode))
        self._await(lambda: opcode in self._acks or self._naks, f"ack 0x{opcode:02x}")
        if self._naks:
            raise ProtocolError(f"request 0x{opcode:02x} rejected: {self._naks[-1]}")

    # -- public operations
    def get_info(self) -> P.DeviceInfo:
        self._info = None
        self._request(P.Frame(P.GET_INFO))
        self._await(lambda: self._info is not None or self._naks, "INFO")
        if self._info is None:
            raise ProtocolError(f"GET_INFO rejected: {self._naks[-1]}")
        return self._info

    def subscribe(self) -> None:
        self._expect_ack(P.SUBSCRIBE)

    def unsubscribe(self) -> None:
        self._expect_ack(P.UNSUBSCRIBE)

    def poll(self, timeout: float = 0.0) -> list[TimestampedPoint]:
        """Process whatever arrived; returns the new realtime points."""
        if not self.disconnected:
            self._pump(timeout)
        return self._deliver()

    def stream(self, duration_s: float | None = None):
        """Yield realtime points until disconnect (or `duration_s` of real time)."""
        end = None if duration_s is None else time.monotonic() + duration_s
        while not self.disconnected and (end is None or time.monotonic() < end):
            yield from self.poll(0.1)
        yield from self._deliver()

    def _read_flash(self, from_id, to_id):
        for attempt in (1, 2):
            self._dump_done = None
            self._request(P.flash_read_frame(from_id, to_id))
            self._await(lambda: self._dump_done is not None or self._naks, "flash dump")
            if self._naks:
                _, err, available = self._naks[-1]
                if err == P.ERR_NOT_RETAINED:
                    raise NotRetained(f"{self.device_name}: ids {from_id}..{to_id} not retained", available)
                raise ProtocolError(f"FLASH_READ rejected with error {err}")
            ok, chunks = self._dump_done
            if ok:
                return [decode_record(c) for c in chunks]
            log.warning("%s: dump checksum mismatch (attempt %d)", self.device_name, attempt)
        raise IntegrityError(f"{self.device_name}: flash dump failed checksum twice")

    def backfill(self, now_ns: int | None = None, redownload: bool = False) -> BackfillResult:
        """Download flash records, timestamp them from their ids and queue them.

        Ids at or before the persisted high-water mark are skipped, so running
        this repeatedly never uploads a record twice. With `redownload` the
        whole retained window is fetched again (and still skipped).
        """
        info = self.get_info()
        if now_ns is None:
            now_ns = self.clock.now_ns()
        latest, oldest = info.latest_id, info.oldest_id
        if latest is None:
            return BackfillResult([], None)
        gaps = []
        span = (latest - oldest) % ID_MODULUS
        if span >= BACKFILL_WINDOW:
            new_oldest = (latest - (BACKFILL_WINDOW - 1)) % ID_MODULUS
            gaps.append((oldest, (new_oldest - 1) % ID_MODULUS))
            oldest, span = new_oldest, BACKFILL_WINDOW - 1
        last = self.last_backfilled_id
        if last is not None and (latest - last) % ID_MODULUS > span + 1 and (latest - last) % ID_MODULUS < BACKFILL_WINDOW:
            # records after our high-water mark were overwritten before we got them
            gaps.append(((last + 1) % ID_MODULUS, (oldest - 1) % ID_MODULUS))
        if last is not None and (latest - last) % ID_MODULUS >= BACKFILL_WINDOW:
            last = None  # device reset or stale state
        from_id = oldest
        if last is not None and not redownload:
            if last == latest:
                return BackfillResult([], latest, 0, gaps)
            if (latest - last) % ID_MODULUS <= span:
                from_id = (last + 1) % ID_MODULUS
        records = self._read_flash(from_id, latest)

        points, skipped = [], 0
        expected = from_id
        for rec in records:
            if rec.rec_id != expected:
                gaps.append((expected, (rec.rec_id - 1) % ID_MODULUS))
            expected = (rec.rec_id + 1) % ID_MODULUS
            if last is not None and (last - rec.rec_id) % ID_MODULUS < BACKFILL_WINDOW:
                skipped += 1
                continue
            t = backfill_timestamp(now_ns, latest, rec.rec_id)
            points.append(TimestampedPoint(t, self.device_name, float(rec.v1), float(rec.v2),
                                           float(rec.v3), "backfill"))
        if self.uploader is not None:
            self.uploader.submit(points)
        self._state["last_backfilled_id"] = latest
        self._save_state()
        return BackfillResult(points, latest, skipped, gaps)

    def close(self) -> None:
        self.transport.close()
        self.disconnected = True


# ---------------------------------------------------------------- gateway

def scan(registry, filter_prefix: str = "TAC") -> list[DeviceDescriptor]:
    """List advertised devices whose name starts with `filter_prefix`."""
    try:
        entries = registry.entries()
    except (ConnectionError, OSError) as exc:
        log.warning("scan: transport unavailable (%s)", exc)
        return []
    found = []
    for entry in entries:
        if not entry.name.startswith(filter_prefix):
            continue
        try:
            transport = entry.connect()
        except (ConnectionError, OSError) as exc:
            log.warning("scan: %s at %s unreachable (%s)", entry.name, entry.address, exc)
            continue
        session = DeviceSession(transport, entry.name, SystemClock(), timeout_s=2.0)
        try:
            info = session.get_info()
        except (ConnectionError, TimeoutError, ProtocolError) as exc:
            log.warning("scan: %s did not answer GET_INFO (%s)", entry.name, exc)
            continue
        finally:
            transport.close()
        found.append(DeviceDescriptor(info.name, entry.address, info.latest_id))
    return found


class Gateway:
    def __init__(self, registry, client, spool_dir, clock=None, filter_prefix: str = "TAC",
                 batch_size: int = 600):
        self.registry = registry
        self.client = client
        self.spool_dir = spool_dir
        self.clock = clock or SystemClock()
        self.filter_prefix = filter_prefix
        self.batch_size = batch_size
        self.uploaders: dict[str, Uploader] = {}

    def scan(self) -> list[DeviceDescriptor]:
        return scan(self.registry, self.filter_prefix)

    def uploader(self, device_name: str) -> Uploader:
        if device_name not in self.uploaders:
            self.uploaders[device_name] = Uploader(device_name, self.client, self.spool_dir,
                                                   self.batch_size)
        return self.uploaders[device_name]

    def connect(self, device_name: str, timeout_s: float = 5.0) -> DeviceSession:
        for entry in self.registry.entries():
            if entry.name == device_name:
                if not device_name.startswith(self.filter_prefix):
                    raise InvalidInput(f"{device_name} does not match filter {self.filter_prefix!r}")
                return DeviceSession(entry.connect(), device_name, self.clock,
                                     self.uploader(device_name), self.spool_dir, timeout_s)
        raise LookupError(f"device {device_name!r} not advertised")

    def flush(self) -> bool:
        return all([u.flush() for u in self.uploaders.values()])

    def close(self):
        for u in self.uploaders.values():
            u.close()
