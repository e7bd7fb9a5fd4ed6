"""Potentiostat front end: TIA gain ladder, 12-bit ADC, auto-ranging, averaging."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InvalidInput
from .records import ID_MODULUS, TYPE_MINUTE_AVERAGE, FlashRecord

ADC_MAX = 4095
GAIN_DOWN_ABOVE = 3686  # 90 % of full scale
GAIN_UP_BELOW = 410  # 10 % of full scale

# LMP91000 internal TIA resistors plus one external feedback resistor
DEFAULT_RESISTANCES = (2750.0, 3500.0, 7000.0, 14000.0, 35000.0, 120000.0, 350000.0, 1000000.0)
TEMP_RESOLUTION_C = 0.01
RH_RESOLUTION_PCT = 0.04
TEMP_ACCURACY_C = 0.3
RH_ACCURACY_PCT = 2.0


@dataclass(frozen=True)
class GainTable:
    resistances_ohm: tuple = DEFAULT_RESISTANCES
    v_ref: float = 0.2
    v_fullscale: float = 3.0
    ref_index: int = 6

    def __post_init__(self):
        r = tuple(float(x) for x in self.resistances_ohm)
        object.__setattr__(self, "resistances_ohm", r)
        if len(r) != 8:
            raise InvalidInput("gain table needs exactly 8 resistances")
        if any(x <= 0 for x in r) or any(b <= a for a, b in zip(r, r[1:])):
            raise InvalidInput("resistances must be positive and strictly ascending")
        if not 0 <= self.ref_index < 8:
            raise InvalidInput("ref_index out of range")
        if self.v_fullscale <= 0:
            raise InvalidInput("v_fullscale must be > 0")

    @property
    def offset_counts(self) -> float:
        return self.v_ref / self.v_fullscale * ADC_MAX

    def counts_per_nA(self, gain_index: int) -> float:
        return self.resistances_ohm[gain_index] * 1e-9 / self.v_fullscale * ADC_MAX

    def normalize_counts(self, counts, gain_index):
        """Map counts taken at `gain_index` onto the reference gain (float)."""
        g = np.asarray(gain_index)
        if np.any((g < 0) | (g > 7)):
            raise InvalidInput(f"unknown gain index {gain_index!r}")
        r = np.asarray(self.resistances_ohm)[g]
        ratio = self.resistances_ohm[self.ref_index] / r
        off = self.offset_counts
        out = off + (np.asarray(counts, dtype=float) - off) * ratio
        return float(out) if np.ndim(out) == 0 else out


def sensitivity_for_slope(counts_per_ppm: float, table: GainTable = GainTable()) -> float:
    """Fuel-cell sensitivity (nA/ppm) giving `counts_per_ppm` at the reference gain."""
    return counts_per_ppm / table.counts_per_nA(table.ref_index)


@dataclass(frozen=True)
class SensorSample:
    adc_counts: int
    gain_index: int
    temp_C: float
    rh_pct: float

    def __post_init__(self):
        if not 0 <= self.adc_counts <= ADC_MAX:
            raise InvalidInput("adc_counts outside 12-bit range")
        if not 0 <= self.gain_index <= 7:
            raise InvalidInput("gain_index outside table")


def adc_convert(current_nA: float, gain_index: int, table: GainTable) -> int:
    volts = current_nA * 1e-9 * table.resistances_ohm[gain_index] + table.v_ref
    counts = round(volts / table.v_fullscale * ADC_MAX)
    return min(max(counts, 0), ADC_MAX)


def quantize(value: float, step: float) -> float:
    return round(round(value / step) * step, 6)


@dataclass
class Environmental:
    """HTU21D-like sensor with a fixed per-device calibration error."""
    temp_offset_C: float = 0.0
    rh_offset_pct: float = 0.0

    @classmethod
    def from_rng(cls, rng: np.random.Generator):
        return cls(float(rng.uniform(-TEMP_ACCURACY_C, TEMP_ACCURACY_C)),
                   float(rng.uniform(-RH_ACCURACY_PCT, RH_ACCURACY_PCT)))

    def read(self, temp_C: float, rh_pct: float) -> tuple[float, float]:
        t = quantize(temp_C + self.temp_offset_C, TEMP_RESOLUTION_C)
        rh = quantize(min(max(rh_pct + self.rh_offset_pct, 0.0), 100.0), RH_RESOLUTION_PCT)
        return t, rh


def acquire_tick(current_nA: float, gain_index: int, table: GainTable, temp_C: float, rh_pct: float,
                 env_sensor: Environmental = Environmental()) -> SensorSample:
    t, rh = env_sensor.read(temp_C, rh_pct)
    return SensorSample(adc_convert(current_nA, gain_index, table), gain_index, t, rh)


def auto_gain(sample: SensorSample, table: GainTable = GainTable()) -> int:
    """Next gain index: one step toward the in-band window [410, 3686]."""
    g = sample.gain_index
    if sample.adc_counts > GAIN_DOWN_ABOVE and g > 0:
        return g - 1
    if sample.adc_counts < GAIN_UP_BELOW and g < len(table.resistances_ohm) - 1:
        return g + 1
    return g


def next_rec_id(prev_id: int) -> int:
    return (prev_id + 1) % ID_MODULUS


def minute_average(buffer: Sequence[SensorSample], rec_id: int, table: GainTable = GainTable(),
                   rec_type: int = TYPE_MINUTE_AVERAGE) -> FlashRecord | None:
    """Average one minute of samples; an empty buffer yields no record (a gap)."""
    if not buffer:
        return None
    counts = np.array([s.adc_counts for s in buffer], dtype=float)
    gains = np.array([s.gain_index for s in buffer])
    alcohol = np.mean(table.normalize_counts(counts, gains))
    temp = np.mean([s.temp_C for s in buffer])
    rh = np.mean([s.rh_pct for s in buffer])
    return FlashRecord(rec_type, rec_id, float(alcohol), float(temp), float(rh))
