"""Calibration fitting, count-to-ppm conversion, drift removal and session metrics.

Series are plain numpy arrays: time in seconds, values in counts or ppm.
Functions here are pure and safe to call concurrently on independent series.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .device.frontend import GainTable
from .errors import DegenerateFit, InvalidInput, NoPeak, UndefinedRatio


@dataclass(frozen=True)
class CalibrationCurve:
    slope_counts_per_ppm: float
    intercept_counts: float
    ref_gain_index: int = 6
    fit_r2: float = 1.0

    def __post_init__(self):
        if not self.slope_counts_per_ppm > 0:
            raise InvalidInput(f"calibration slope must be positive, got {self.slope_counts_per_ppm}")
        if not 0.0 <= self.fit_r2 <= 1.0:
            raise InvalidInput(f"fit_r2 outside [0, 1]: {self.fit_r2}")

    @classmethod
    def through(cls, a: tuple[float, float], b: tuple[float, float], ref_gain_index: int = 6):
        """Line through two (counts, ppm) pairs."""
        (c1, p1), (c2, p2) = a, b
        if p1 == p2:
            raise DegenerateFit("anchor pairs share a concentration")
        slope = (c2 - c1) / (p2 - p1)
        return cls(slope, c1 - slope * p1, ref_gain_index, 1.0)

    def to_dict(self) -> dict:
        return {"slope_counts_per_ppm": self.slope_counts_per_ppm,
                "intercept_counts": self.intercept_counts,
                "ref_gain_index": self.ref_gain_index, "fit_r2": self.fit_r2}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationCurve":
        return cls(float(d["slope_counts_per_ppm"]), float(d["intercept_counts"]),
                   int(d.get("ref_gain_index", 6)), float(d.get("fit_r2", 1.0)))


@dataclass(frozen=True)
class BaselineStats:
    mean_counts: float
    sd_counts: float
    mean_ppm: float
    sd_ppm: float
    window: tuple[float, float]


@dataclass(frozen=True)
class SessionMetrics:
    auc_ppm_min: float
    peak_value: float
    peak_time_s: float


def fit_calibration(points: Sequence[tuple[float, float]], ref_gain_index: int = 6) -> CalibrationCurve:
    """Ordinary least squares of counts on ppm over (known_ppm, mean_counts) pairs."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInput("expected a sequence of (ppm, counts) pairs")
    x, y = arr[:, 0], arr[:, 1]
    if np.unique(x).size < 2:
        raise DegenerateFit("need at least two distinct concentrations")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    if not slope > 0:
        raise DegenerateFit(f"fitted slope {slope:.4g} is not positive")
    return CalibrationCurve(float(slope), float(intercept), ref_gain_index, min(max(r2, 0.0), 1.0))


def adc_to_ppm(counts, gain_index, cal: CalibrationCurve, table: GainTable = GainTable()):
    """Counts at `gain_index` to ppm through the reference-gain calibration line."""
    if table.ref_index != cal.ref_gain_index:
        raise InvalidInput("gain table and calibration disagree on the reference gain")
    norm = table.normalize_counts(counts, gain_index)
    out = (np.asarray(norm, dtype=float) - cal.intercept_counts) / cal.slope_counts_per_ppm
    return float(out) if np.ndim(out) == 0 else out


def _window_mask(t, windows):
    if len(windows) == 2 and np.isscalar(windows[0]):
        windows = [windows]
    mask = np.zeros(t.shape, dtype=bool)
    for lo, hi in windows:
        if hi <= lo:
            raise InvalidInput(f"empty fit window ({lo}, {hi})")
        mask |= (t >= lo) & (t <= hi)
    return mask


def baseline_fit(t_s, y, fit_windows, degree: int = 2) -> np.ndarray:
    """Polynomial fitted over the alcohol-free windows, evaluated on all of `t_s`."""
    t = np.asarray(t_s, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape:
        raise InvalidInput("time and value arrays differ in length")
    mask = _window_mask(t, fit_windows)
    if mask.sum() < degree + 1:
        raise InvalidInput(f"fit window holds {int(mask.sum())} points, need {degree + 1}")
    # centre and scale time so the normal equations stay well conditioned
    mid = 0.5 * (t.min() + t.max())
    half = max(0.5 * (t.max() - t.min()), 1.0)
    u = (t - mid) / half
    V = np.vander(u, degree + 1)
    coef, *_ = np.linalg.lstsq(V[mask], y[mask], rcond=None)
    return V @ coef


def remove_baseline(t_s, y, fit_windows, degree: int = 2) -> np.ndarray:
    """Subtract a quadratic fitted over known alcohol-free spans.

    `fit_windows` is one (t0, t1) pair or a list of them, inclusive, in the
    same units as `t_s`. Negative corrected values are kept.
    """
    return np.asarray(y, dtype=float) - baseline_fit(t_s, y, fit_windows, degree)


def _select(t_s, y, t0, t1):
    t = np.asarray(t_s, dtype=float)
    v = np.asarray(y, dtype=float)
    if t.shape != v.shape:
        raise InvalidInput("time and value arrays differ in length")
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise InvalidInput("series must be strictly increasing in time")
    m = np.ones(t.shape, dtype=bool)
    if t0 is not None:
        m &= t >= t0
    if t1 is not None:
        m &= t <= t1
    return t[m], v[m]


def auc(t_s, y, t0: float | None = None, t1: float | None = None) -> float:
    """Trapezoidal area in value·minutes over the native samples in [t0, t1]."""
    t, v = _select(t_s, y, t0, t1)
    if t.size < 2:
        return 0.0
    return float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(t)) / 60.0)


def auc_ratio(a: float, b: float) -> float:
    if b == 0:
        raise UndefinedRatio("reference AUC is zero")
    return a / b


def peak(t_s, y) -> tuple[float, float]:
    """(time, value) of the maximum, earliest on ties."""
    t, v = _select(t_s, y, None, None)
    if v.size == 0 or not np.any(v > 0):
        raise NoPeak("series has no positive maximum")
    k = int(np.argmax(v))
    return float(t[k]), float(v[k])


def peak_delay(bac_t, bac, tac_t, tac) -> float:
    """Seconds from the BAC maximum to the TAC maximum."""
    return peak(tac_t, tac)[0] - peak(bac_t, bac)[0]


def session_metrics(t_s, y, t0=None, t1=None) -> SessionMetrics:
    pt, pv = peak(*_select(t_s, y, t0, t1))
    return SessionMetrics(auc(t_s, y, t0, t1), pv, pt)


def baseline_stats(t_s, counts, window: tuple[float, float], cal: CalibrationCurve) -> BaselineStats:
    t, c = _select(t_s, counts, *window)
    if c.size < 2:
        raise InvalidInput("baseline window holds fewer than two samples")
    mean_c, sd_c = float(c.mean()), float(c.std(ddof=1))
    return BaselineStats(mean_c, sd_c, (mean_c - cal.intercept_counts) / cal.slope_counts_per_ppm,
                         sd_c / cal.slope_counts_per_ppm, (float(window[0]), float(window[1])))
