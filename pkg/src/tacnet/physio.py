"""Ground-truth physiology and transducer model.

Chain simulated here, one virtual second at a time:

    drinks -> BAC (Widmark, first-order absorption, zero-order elimination)
           -> sweat alcohol (partition coefficient)
           -> chamber vapor ppm (well-mixed mass balance, capped by Henry's law)
           -> fuel-cell current (linear in ppm, plus thermal drift and humidity spikes)

Everything is deterministic; noise is added downstream by the device emulator.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInput

ETHANOL_DENSITY_G_PER_ML = 0.789
STANDARD_DRINK_ML = 118.0
STANDARD_DRINK_ABV = 0.15
PERSPIRATION_RANGE_ML_HR = (20.8, 1800.0)
# ppm of vapor per mg/dL of liquid at 25 C
HENRY_PPM_PER_MG_DL = 1.0

GROUND_TRUTH_COLUMNS = ("t_s", "bac_mg_dL", "sweat_mg_dL", "chamber_ppm", "rh_pct", "temp_C")


@dataclass(frozen=True)
class SubjectParams:
    body_mass_kg: float = 75.0
    widmark_r: float = 0.68
    absorption_rate_per_hr: float = 3.0
    elimination_mg_dL_hr: float = 15.0
    perspiration_mL_hr: float = 200.0
    skin_excretion_fraction: float = 0.01

    def __post_init__(self):
        for name in ("body_mass_kg", "widmark_r", "absorption_rate_per_hr",
                     "elimination_mg_dL_hr", "perspiration_mL_hr", "skin_excretion_fraction"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise InvalidInput(f"{name} must be a positive number, got {value!r}")
        lo, hi = PERSPIRATION_RANGE_ML_HR
        if not lo <= self.perspiration_mL_hr <= hi:
            raise InvalidInput(
                f"perspiration_mL_hr={self.perspiration_mL_hr} outside [{lo}, {hi}]")
        if self.skin_excretion_fraction > 0.05:
            raise InvalidInput("skin_excretion_fraction must be in (0, 0.05]")

    @property
    def mg_dL_per_gram(self) -> float:
        """BAC rise per gram of ethanol absorbed (1 g/kg body water ~ 100 mg/dL)."""
        return 100.0 / (self.widmark_r * self.body_mass_kg)


@dataclass(frozen=True)
class DrinkEvent:
    t_start_s: float
    volume_mL: float = STANDARD_DRINK_ML
    abv_fraction: float = STANDARD_DRINK_ABV
    duration_s: float = 300.0

    def __post_init__(self):
        if not self.duration_s > 0:
            raise InvalidInput("duration_s must be > 0")
        if not 0.0 <= self.abv_fraction <= 1.0:
            raise InvalidInput("abv_fraction must be in [0, 1]")
        if self.volume_mL < 0:
            raise InvalidInput("volume_mL must be >= 0")

    @property
    def ethanol_g(self) -> float:
        return self.volume_mL * self.abv_fraction * ETHANOL_DENSITY_G_PER_ML


def standard_drinks(n: int, t_start_s: float, duration_s: float = 300.0) -> list[DrinkEvent]:
    """`n` standard drinks consumed together over one `duration_s` window."""
    return [DrinkEvent(t_start_s, STANDARD_DRINK_ML * n, STANDARD_DRINK_ABV, duration_s)]


@dataclass(frozen=True)
class EnvState:
    ambient_temp_C: float = 25.0
    skin_temp_C: float = 33.0
    ambient_rh_pct: float = 25.0
    ambient_ethanol_ppm: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ambient_rh_pct <= 100.0:
            raise InvalidInput("ambient_rh_pct must be in [0, 100]")
        if self.ambient_ethanol_ppm < 0:
            raise InvalidInput("ambient_ethanol_ppm must be >= 0")

    @property
    def temp_gradient_C(self) -> float:
        return self.skin_temp_C - self.ambient_temp_C


@dataclass(frozen=True)
class ChamberState:
    gas_ppm: float = 0.0
    chamber_rh_pct: float = 25.0
    chamber_temp_C: float = 25.0


@dataclass(frozen=True)
class ChamberParams:
    """Rate constants of the skin-side collection chamber.

    With the defaults the steady-state vapor fraction of the Henry value is
    perspiration_mL_hr / 2000, so the cap is never reached inside the
    validated perspiration range at the default excretion fraction.
    """
    emission_gain: float = (1.0 / 1800.0) / 20.0
    k_vent_per_s: float = 1.0 / 2400.0
    k_cell_per_s: float = 1.0 / 7200.0
    rh_time_const_s: float = 300.0
    rh_half_perspiration_mL_hr: float = 400.0
    # fraction of the skin-ambient difference seen by the chamber thermometer
    skin_coupling: float = 0.8

    @property
    def k_total_per_s(self) -> float:
        return self.k_vent_per_s + self.k_cell_per_s


@dataclass(frozen=True)
class DriftParams:
    plateau_ppm_per_degC: float = 5.81 / 8.0
    time_const_s: float = 1200.0
    humid_spike_max_ppm: float = 3.0
    humid_spike_duration_s: float = 420.0
    rh_rate_threshold_pct_per_s: float = 0.05
    spike_ppm_per_rate: float = 15.0

    def __post_init__(self):
        if not self.time_const_s > 0:
            raise InvalidInput("time_const_s must be > 0")
        if not 300.0 <= self.humid_spike_duration_s <= 600.0:
            raise InvalidInput("humid_spike_duration_s must be in [300, 600]")
        if self.humid_spike_max_ppm < 0:
            raise InvalidInput("humid_spike_max_ppm must be >= 0")


# ---------------------------------------------------------------- BAC

def _absorbed_grams(drink: DrinkEvent, ka_per_s: float, t: np.ndarray) -> np.ndarray:
    """Closed-form grams absorbed from one drink ingested at a constant rate."""
    tau = np.asarray(t, dtype=float) - drink.t_start_s
    m, d = drink.ethanol_g, drink.duration_s
    rate = m / d
    out = np.zeros_like(tau)
    during = (tau > 0) & (tau <= d)
    after = tau > d
    gut_during = rate / ka_per_s * (1.0 - np.exp(-ka_per_s * tau[during]))
    out[during] = rate * tau[during] - gut_during
    gut_end = rate / ka_per_s * (1.0 - math.exp(-ka_per_s * d))
    out[after] = m - gut_end * np.exp(-ka_per_s * (tau[after] - d))
    return out


def bac_profile(subject: SubjectParams, drinks: Sequence[DrinkEvent], t_grid) -> np.ndarray:
    """BAC in mg/dL on `t_grid` (seconds).

    Absorption is integrated in closed form; zero-order elimination is applied
    with a reflecting barrier at zero (Lindley recursion), so the curve returns
    to exactly 0 once the body is clear.
    """
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise InvalidInput("t_grid must be a non-empty 1-D sequence")
    if t.size > 1 and not np.all(np.diff(t) > 0):
        raise InvalidInput("t_grid must be strictly increasing")
    ka = subject.absorption_rate_per_hr / 3600.0
    absorbed = np.zeros_like(t)
    for drink in drinks:
        absorbed += _absorbed_grams(drink, ka, t)
    uptake = absorbed * subject.mg_dL_per_gram
    beta = subject.elimination_mg_dL_hr / 3600.0

    bac = np.empty_like(t)
    level = uptake[0]
    bac[0] = level
    d_uptake = np.diff(uptake)
    dt = np.diff(t)
    for i in range(1, t.size):
        level = level + d_uptake[i - 1] - beta * dt[i - 1]
        if level < 0.0:
            level = 0.0
        bac[i] = level
    return bac


# ---------------------------------------------------------------- partitioning

def sweat_alcohol_mg_dL(bac_mg_dL, partition_coefficient: float = 1.0):
    bac = np.asarray(bac_mg_dL, dtype=float)
    if np.any(bac < 0):
        raise InvalidInput("BAC must be non-negative")
    out = partition_coefficient * bac
    return float(out) if out.ndim == 0 else out


def henry_gas_ppm(liquid_mg_dL, temp_C: float = 25.0,
                  henry_ppm_per_mg_dL: float = HENRY_PPM_PER_MG_DL,
                  temp_multiplier: Callable[[float], float] | None = None):
    """Equilibrium headspace ppm above a liquid of the given ethanol content."""
    liquid = np.asarray(liquid_mg_dL, dtype=float)
    if np.any(liquid < 0):
        raise InvalidInput("liquid concentration must be non-negative")
    k = henry_ppm_per_mg_dL
    if temp_multiplier is not None:
        k = k * temp_multiplier(temp_C)
    out = liquid * k
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- chamber

def chamber_rh_target(subject: SubjectParams, env: EnvState, params: ChamberParams) -> float:
    p = subject.perspiration_mL_hr
    frac = p / (p + params.rh_half_perspiration_mL_hr)
    return env.ambient_rh_pct + (100.0 - env.ambient_rh_pct) * frac


def chamber_steady_state_ppm(sweat_mg_dL: float, subject: SubjectParams,
                             params: ChamberParams = ChamberParams()) -> float:
    """Fixed point of the chamber mass balance, before the Henry cap."""
    emission = params.emission_gain * subject.skin_excretion_fraction * subject.perspiration_mL_hr
    return emission * sweat_mg_dL / params.k_total_per_s


def chamber_step(state: ChamberState, sweat_mg_dL: float, subject: SubjectParams,
                 env: EnvState, dt_s: float = 1.0,
                 params: ChamberParams = ChamberParams(),
                 henry: Callable[[float, float], float] = henry_gas_ppm) -> ChamberState:
    """Advance the skin-side chamber by one explicit Euler step."""
    if not dt_s > 0:
        raise InvalidInput("dt_s must be > 0")
    temp = env.ambient_temp_C + params.skin_coupling * env.temp_gradient_C
    emission = (params.emission_gain * subject.skin_excretion_fraction
                * subject.perspiration_mL_hr * sweat_mg_dL)
    ppm = state.gas_ppm + dt_s * (emission - params.k_total_per_s * state.gas_ppm)
    cap = henry(sweat_mg_dL, temp)
    ppm = min(max(ppm, 0.0), cap)

    target = chamber_rh_target(subject, env, params)
    alpha = 1.0 - math.exp(-dt_s / params.rh_time_const_s)
    rh = state.chamber_rh_pct + alpha * (target - state.chamber_rh_pct)
    return ChamberState(ppm, rh, temp)


# ---------------------------------------------------------------- fuel cell

def baseline_drift_ppm(t_since_donned_s: float | None, temp_gradient_C: float,
                       drift: DriftParams) -> float:
    """Thermal baseline shift in ppm-equivalent: sign(g) * plateau * (1 - exp(-t/tau))."""
    if t_since_donned_s is None or t_since_donned_s <= 0 or temp_gradient_C == 0:
        return 0.0
    plateau = drift.plateau_ppm_per_degC * abs(temp_gradient_C)
    return math.copysign(plateau, temp_gradient_C) * (1.0 - math.exp(-t_since_donned_s / drift.time_const_s))


def humidity_spike_ppm(age_s: float | None, amplitude_ppm: float, duration_s: float) -> float:
    """Raised-cosine transient; zero outside [0, duration_s]."""
    if age_s is None or age_s < 0 or age_s > duration_s:
        return 0.0
    return amplitude_ppm * 0.5 * (1.0 - math.cos(2.0 * math.pi * age_s / duration_s))


def fuel_cell_current_nA(ppm: float, temp_gradient_C: float, rh_rate_pct_per_s: float,
                         t_since_donned_s: float | None, drift: DriftParams,
                         sensitivity_nA_per_ppm: float = 387.2222222222222,
                         spike_age_s: float | None = None,
                         spike_amplitude_ppm: float = 0.0) -> float:
    """Sensor current for a given vapor level and disturbance state.

    `spike_age_s`/`spike_amplitude_ppm` describe an already triggered humidity
    transient; `FuelCell` tracks triggering from `rh_rate_pct_per_s`.
    """
    if ppm < 0:
        raise InvalidInput("ppm must be non-negative")
    signal = ppm + baseline_drift_ppm(t_since_donned_s, temp_gradient_C, drift)
    signal += humidity_spike_ppm(spike_age_s, spike_amplitude_ppm, drift.humid_spike_duration_s)
    return sensitivity_nA_per_ppm * signal


class FuelCell:
    """Stateful wrapper that triggers humidity transients from the RH rate."""

    def __init__(self, drift: DriftParams = DriftParams(), sensitivity_nA_per_ppm: float = 387.2222222222222):
        self.drift = drift
        self.sensitivity_nA_per_ppm = sensitivity_nA_per_ppm
        self._spike_start = None
        self._spike_amplitude = 0.0

    def spike_amplitude_for(self, rh_rate_pct_per_s: float) -> float:
        d = self.drift
        return min(d.humid_spike_max_ppm, d.spike_ppm_per_rate * abs(rh_rate_pct_per_s))

    def current_nA(self, t_s: float, ppm: float, temp_gradient_C: float,
                   rh_rate_pct_per_s: float, t_since_donned_s: float | None) -> float:
        d = self.drift
        active = (self._spike_start is not None
                  and t_s - self._spike_start <= d.humid_spike_duration_s)
        if not active and abs(rh_rate_pct_per_s) > d.rh_rate_threshold_pct_per_s:
            self._spike_start = t_s
            self._spike_amplitude = self.spike_amplitude_for(rh_rate_pct_per_s)
        age = None if self._spike_start is None else t_s - self._spike_start
        return fuel_cell_current_nA(ppm, temp_gradient_C, rh_rate_pct_per_s, t_since_donned_s,
                                    d, self.sensitivity_nA_per_ppm, age, self._spike_amplitude)


# ---------------------------------------------------------------- sessions

@dataclass(frozen=True)
class Observation:
    """What the wearable's sensors are exposed to during one second."""
    t_s: float
    bac_mg_dL: float
    sweat_mg_dL: float
    chamber_ppm: float
    rh_pct: float
    temp_C: float
    temp_gradient_C: float
    t_since_donned_s: float | None


@dataclass
class EnvSchedule:
    """Piecewise-constant environment: list of (t_start_s, EnvState), sorted."""
    segments: list[tuple[float, EnvState]] = field(default_factory=lambda: [(0.0, EnvState())])

    def __post_init__(self):
        if not self.segments:
            raise InvalidInput("env schedule needs at least one segment")
        self.segments = sorted(self.segments, key=lambda s: s[0])

    def at(self, t_s: float) -> EnvState:
        current = self.segments[0][1]
        for start, env in self.segments:
            if start <= t_s:
                current = env
            else:
                break
        return current


class SessionModel:
    """Steps a worn sensor through a drinking session on a 1 s grid."""

    def __init__(self, subject: SubjectParams, drinks: Sequence[DrinkEvent], duration_s: int,
                 env: EnvSchedule | None = None, chamber: ChamberParams = ChamberParams(),
                 partition_coefficient: float = 1.0, donned_at_s: float = 0.0):
        self.subject = subject
        self.drinks = list(drinks)
        self.duration_s = int(duration_s)
        self.env = env or EnvSchedule()
        self.chamber_params = chamber
        self.partition_coefficient = partition_coefficient
        self.donned_at_s = donned_at_s
        self.t_grid = np.arange(self.duration_s + 1, dtype=float)
        self.bac = bac_profile(subject, self.drinks, self.t_grid)
        self.sweat = sweat_alcohol_mg_dL(self.bac, partition_coefficient)
        env0 = self.env.at(0.0)
        self._state = ChamberState(0.0, chamber_rh_target(subject, env0, chamber),
                                   env0.ambient_temp_C + chamber.skin_coupling * env0.temp_gradient_C)
        self._i = 0

    def __iter__(self):
        return self

    def __next__(self) -> Observation:
        if self._i > self.duration_s:
            raise StopIteration
        i = self._i
        t = self.t_grid[i]
        env = self.env.at(t)
        if i > 0:
            self._state = chamber_step(self._state, self.sweat[i], self.subject, env, 1.0,
                                       self.chamber_params)
        self._i += 1
        donned = t - self.donned_at_s if t >= self.donned_at_s else None
        return Observation(t, float(self.bac[i]), float(self.sweat[i]), self._state.gas_ppm,
                           self._state.chamber_rh_pct, self._state.chamber_temp_C,
                           env.temp_gradient_C, donned)


class JarModel:
    """Sealed calibration jar: headspace relaxes to Henry equilibrium."""

    def __init__(self, liquid_mg_dL: float, duration_s: int, temp_C: float = 25.0,
                 rh_pct: float = 95.0, time_const_s: float = 300.0):
        self.equilibrium_ppm = henry_gas_ppm(liquid_mg_dL, temp_C)
        self.duration_s = int(duration_s)
        self.temp_C = temp_C
        self.rh_pct = rh_pct
        self.time_const_s = time_const_s
        self._ppm = 0.0
        self._i = 0

    def __iter__(self):
        return self

    def __next__(self) -> Observation:
        if self._i > self.duration_s:
            raise StopIteration
        if self._i > 0:
            alpha = 1.0 - math.exp(-1.0 / self.time_const_s)
            self._ppm += alpha * (self.equilibrium_ppm - self._ppm)
        t = float(self._i)
        self._i += 1
        return Observation(t, 0.0, 0.0, self._ppm, self.rh_pct, self.temp_C, 0.0, None)


def write_ground_truth_csv(path, observations: Iterable[Observation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GROUND_TRUTH_COLUMNS)
        for o in observations:
            w.writerow([repr(float(o.t_s)), repr(o.bac_mg_dL), repr(o.sweat_mg_dL),
                        repr(o.chamber_ppm), repr(o.rh_pct), repr(o.temp_C)])
