"""Firmware emulator: 1 Hz acquisition, minute records, frame handling."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInput, NotRetained
from ..physio import DriftParams, FuelCell, Observation
from . import protocol as P
from .fifo import DEFAULT_CAPACITY_BYTES, FlashFifo
from .frontend import (Environmental, GainTable, SensorSample, acquire_tick, auto_gain,
                       minute_average, next_rec_id, sensitivity_for_slope)
from .records import ID_MODULUS, encode_record

log = logging.getLogger(__name__)

DEFAULT_SLOPE_COUNTS_PER_PPM = 185.0
SAMPLES_PER_RECORD = 60


@dataclass
class DeviceConfig:
    name: str = "TAC-01"
    gain_table: GainTable = field(default_factory=GainTable)
    # ground-truth sensitivity, expressed as counts/ppm at the reference gain
    slope_counts_per_ppm: float = DEFAULT_SLOPE_COUNTS_PER_PPM
    drift: DriftParams = field(default_factory=DriftParams)
    # minute-average noise levels (counts at the reference gain)
    noise_clean_counts: float = 5.8
    noise_on_body_counts: float = 23.8
    seed: int = 0
    initial_gain: int = 7
    fifo_capacity_bytes: int = DEFAULT_CAPACITY_BYTES
    fifo_path: str | None = None

    @property
    def sensitivity_nA_per_ppm(self) -> float:
        return sensitivity_for_slope(self.slope_counts_per_ppm, self.gain_table)


class DeviceEmulator:
    """One wearable, advanced by `tick()` once per virtual second.

    Incoming request bytes go through `receive()`; outgoing frames queue in an
    outbox drained by the transport with `drain()`. Measurement pushes and
    flash dumps share the outbox, so a dump in progress never stalls the 1 Hz
    stream.
    """

    def __init__(self, config: DeviceConfig = None, fifo: FlashFifo | None = None):
        self.config = config or DeviceConfig()
        cfg = self.config
        self.table = cfg.gain_table
        self.rng = np.random.default_rng(cfg.seed)
        self.env_sensor = Environmental.from_rng(self.rng)
        self.fuel_cell = FuelCell(cfg.drift, cfg.sensitivity_nA_per_ppm)
        if fifo is None:
            fifo = FlashFifo(cfg.fifo_path, cfg.fifo_capacity_bytes)
        self.fifo = fifo
        latest = fifo.latest_id()
        self.last_id = latest if latest is not None else ID_MODULUS - 1
        self.gain_index = cfg.initial_gain
        self.buffer: list[SensorSample] = []
        self.uptime_s = 0
        self.acquiring = True
        self.subscribed = False
        # measurement frames handed to the transport
        self.pushes_sent = 0
        self.records_written = 0
        self.last_sample: SensorSample | None = None
        self._push_seq = 0
        self._prev_rh = None
        self._outbox: deque = deque()
        self._decoder = P.FrameDecoder()

    # ------------------------------------------------------------ acquisition
    def _noise_nA(self, on_body: bool) -> float:
        sigma_minute = self.config.noise_on_body_counts if on_body else self.config.noise_clean_counts
        if sigma_minute <= 0:
            return 0.0
        # white per-sample noise sized so that a 60-sample mean has sigma_minute
        sigma_counts = sigma_minute * math.sqrt(SAMPLES_PER_RECORD)
        return float(self.rng.normal(0.0, sigma_counts / self.table.counts_per_nA(self.table.ref_index)))

    def tick(self, obs: Observation) -> SensorSample | None:
        rh_rate = 0.0 if self._prev_rh is None else obs.rh_pct - self._prev_rh
        self._prev_rh = obs.rh_pct
        sample = None
        if self.acquiring:
            on_body = obs.t_since_donned_s is not None
            current = self.fuel_cell.current_nA(obs.t_s, obs.chamber_ppm, obs.temp_gradient_C,
                                                rh_rate, obs.t_since_donned_s)
            current += self._noise_nA(on_body)
            sample = acquire_tick(current, self.gain_index, self.table, obs.temp_C, obs.rh_pct,
                                  self.env_sensor)
            self.buffer.append(sample)
            self.last_sample = sample
            if self.subscribed:
                alcohol = self.table.normalize_counts(sample.adc_counts, sample.gain_index)
                self._outbox.append(P.measurement_frame(self._push_seq, alcohol, sample.temp_C,
                                                        sample.rh_pct))
                self._push_seq = (self._push_seq + 1) & 0xFF
            self.gain_index = auto_gain(sample, self.table)
        self.uptime_s += 1
        if self.uptime_s % SAMPLES_PER_RECORD == 0:
            self._close_minute()
        return sample

    def _close_minute(self):
        self.last_id = next_rec_id(self.last_id)
        rec = minute_average(self.buffer, self.last_id, self.table)
        self.buffer = []
        if rec is None:
            log.debug("%s: empty minute, id %d left as a gap", self.config.name, self.last_id)
            return
        self.fifo.append(rec)
        self.records_written += 1

    # ------------------------------------------------------------ protocol
    def info(self) -> P.DeviceInfo:
        rng = self.fifo.available_range()
        oldest, latest = rng if rng else (None, None)
        return P.DeviceInfo(self.config.name, P.FIRMWARE_VERSION, latest, oldest, len(self.fifo))

    def handle_frame(self, frame: P.Frame) -> list[P.Frame]:
        op = frame.opcode
        if op not in P.REQUEST_PAYLOAD_SIZES:
            return [P.nak_frame(op, P.ERR_UNKNOWN_OPCODE, frame.seq)]
        if len(frame.payload) != P.REQUEST_PAYLOAD_SIZES[op]:
            return [P.nak_frame(op, P.ERR_BAD_LENGTH, frame.seq)]
        if op == P.GET_INFO:
            return P.info_frames(self.info())
        if op == P.SUBSCRIBE:
            self.subscribed = True
            return [P.ack_frame(op, frame.seq)]
        if op == P.UNSUBSCRIBE:
            self.subscribed = False
            return [P.ack_frame(op, frame.seq)]
        if op == P.SET_TIME_REF:
            # the device keeps no wall clock
            return [P.ack_frame(op, frame.seq)]
        from_id, to_id = P.parse_range(frame.payload)
        try:
            records = self.fifo.read_range(from_id, to_id)
        except NotRetained as exc:
            return [P.nak_frame(op, P.ERR_NOT_RETAINED, frame.seq, exc.available)]
        except InvalidInput:
            return [P.nak_frame(op, P.ERR_BAD_RANGE, frame.seq, self.fifo.available_range())]
        return P.dump_frames(from_id, to_id, [encode_record(r) for r in records])

    def receive(self, data: bytes) -> None:
        frames = self._decoder.feed(data)
        for frame in frames:
            self._outbox.extend(self.handle_frame(frame))
        for opcode, seq, length in self._decoder.malformed:
            log.warning("%s: header declares %d-byte payload, framing reset", self.config.name, length)
            self._outbox.append(P.nak_frame(opcode, P.ERR_BAD_LENGTH, seq))
        self._decoder.malformed.clear()

    def drain(self, max_frames: int | None = None) -> bytes:
        out = bytearray()
        n = 0
        while self._outbox and (max_frames is None or n < max_frames):
            frame = self._outbox.popleft()
            if frame.opcode == P.MEASUREMENT:
                self.pushes_sent += 1
            out += frame.encode()
            n += 1
        return bytes(out)

    def disconnect(self) -> None:
        """Link loss: streaming stops and queued notifications are dropped."""
        self.subscribed = False
        self._outbox.clear()
        self._decoder = P.FrameDecoder()

    @property
    def outbox_len(self) -> int:
        return len(self._outbox)
