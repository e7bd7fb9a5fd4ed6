"""Scenario configuration: dataclasses loaded from YAML fixture files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .analytics import CalibrationCurve
from .errors import InvalidInput
from .physio import EnvState, SubjectParams

SCENARIOS = ("calibration_routine", "baseline_characterization", "one_drink", "two_drink",
             "clothing_comparison", "interpersonal_comparison", "custom")
SESSION_SCENARIOS = SCENARIOS[1:]

# the six-jar routine, liquid ethanol in % w/v
DEFAULT_JARS_PCT = (0.0, 0.12, 0.24, 0.36, 0.48, 0.60)


@dataclass(frozen=True)
class SubjectSpec:
    label: str = "subject"
    drinks: int = 1
    params: SubjectParams = field(default_factory=SubjectParams)


@dataclass(frozen=True)
class ProtocolSpec:
    baseline_s: int = 3600
    drink_duration_s: int = 300
    wear_after_s: int = 6 * 3600
    # baseline characterization: minutes of off-body recording before donning
    off_body_s: int = 0
    breathalyzer_interval_s: int = 300
    breathalyzer_sd_mg_dL: float = 1.0
    breathalyzer_clip_mg_dL: float = 2.0

    @property
    def duration_s(self) -> int:
        return self.off_body_s + self.baseline_s + self.drink_duration_s + self.wear_after_s


@dataclass(frozen=True)
class DeviceSpec:
    slope_counts_per_ppm: float = 185.0
    noise_clean_counts: float = 5.8
    noise_on_body_counts: float = 23.8
    name_prefix: str = "TAC"


@dataclass(frozen=True)
class CalibrationSpec:
    jars_pct_wv: tuple[float, ...] = DEFAULT_JARS_PCT
    jar_duration_s: int = 1800
    window_min: tuple[float, float] = (25.0, 30.0)
    max_extensions: int = 3
    # a fixed curve skips the jar routine in session scenarios
    curve: CalibrationCurve | None = None


@dataclass(frozen=True)
class AnalysisSpec:
    # (start, end) in session seconds; negative values count back from the end
    fit_windows_s: tuple[tuple[float, float], ...] = ((2400.0, 3600.0), (-2700.0, 0.0))
    plateau_window_s: tuple[float, float] | None = None


@dataclass(frozen=True)
class FaultSpec:
    service_outages_s: tuple[tuple[float, float], ...] = ()
    # indices of write calls whose response is lost after the service applied them
    lost_responses: tuple[int, ...] = ()
    disconnects_s: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    seed: int = 0
    subjects: tuple[SubjectSpec, ...] = (SubjectSpec(),)
    env: EnvState = field(default_factory=EnvState)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    device: DeviceSpec = field(default_factory=DeviceSpec)
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    faults: FaultSpec = field(default_factory=FaultSpec)
    output_dir: str | None = None

    def __post_init__(self):
        validate(self)


def validate(cfg: ScenarioConfig) -> None:
    if cfg.scenario not in SCENARIOS:
        raise InvalidInput(f"unknown scenario {cfg.scenario!r}; expected one of {SCENARIOS}")
    if not cfg.subjects:
        raise InvalidInput("at least one subject is required")
    labels = [s.label for s in cfg.subjects]
    if len(set(labels)) != len(labels):
        raise InvalidInput(f"duplicate subject labels {labels}")
    for s in cfg.subjects:
        if s.drinks < 0:
            raise InvalidInput(f"{s.label}: drinks must be >= 0")
    jars = cfg.calibration.jars_pct_wv
    if len(set(jars)) < 2 or min(jars) < 0:
        raise InvalidInput("calibration needs at least two distinct non-negative jar concentrations")
    lo, hi = cfg.calibration.window_min
    if not 0 <= lo < hi or hi * 60 > cfg.calibration.jar_duration_s:
        raise InvalidInput("calibration window must lie inside the jar run")
    sc = cfg.scenario
    if sc == "one_drink" and any(s.drinks != 1 for s in cfg.subjects):
        raise InvalidInput("one_drink subjects must have drinks = 1")
    if sc == "two_drink" and any(s.drinks != 2 for s in cfg.subjects):
        raise InvalidInput("two_drink subjects must have drinks = 2")
    if sc == "baseline_characterization" and any(s.drinks for s in cfg.subjects):
        raise InvalidInput("baseline_characterization runs without drinks")
    if sc in ("clothing_comparison", "interpersonal_comparison"):
        if len(cfg.subjects) != 2:
            raise InvalidInput(f"{sc} needs exactly two subjects")
        a, b = cfg.subjects
        if a.drinks != b.drinks or a.drinks < 1:
            raise InvalidInput(f"{sc} subjects must take the same, non-zero number of drinks")
    if sc == "clothing_comparison":
        a, b = (s.params for s in cfg.subjects)
        if dataclasses.replace(a, perspiration_mL_hr=b.perspiration_mL_hr) != b:
            raise InvalidInput("clothing_comparison subjects may differ only in perspiration_mL_hr")
        if a.perspiration_mL_hr == b.perspiration_mL_hr:
            raise InvalidInput("clothing_comparison needs two different perspiration rates")
    for lo, hi in cfg.faults.service_outages_s + cfg.faults.disconnects_s:
        if not 0 <= lo < hi:
            raise InvalidInput(f"bad fault window ({lo}, {hi})")


# ---------------------------------------------------------------- YAML loading

def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidInput(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidInput(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidInput(f"{where}: {exc}") from exc


def _pairs(value, where):
    try:
        return tuple((float(a), float(b)) for a, b in (value or ()))
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"{where}: expected a list of [start, end] pairs") from exc


def from_dict(doc: dict) -> ScenarioConfig:
    if not isinstance(doc, dict) or "scenario" not in doc:
        raise InvalidInput("config must be a mapping with a 'scenario' key")
    doc = dict(doc)
    top = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(doc) - top
    if unknown:
        raise InvalidInput(f"unknown top-level keys {sorted(unknown)}")

    subjects = []
    for i, s in enumerate(doc.get("subjects") or [{}]):
        if not isinstance(s, dict):
            raise InvalidInput(f"subjects[{i}]: expected a mapping")
        s = dict(s)
        params = _build(SubjectParams, s.pop("params", None), f"subjects[{i}].params")
        spec = _build(SubjectSpec, s, f"subjects[{i}]")
        subjects.append(dataclasses.replace(spec, params=params))

    cal = dict(doc.get("calibration") or {})
    if "jars_pct_wv" in cal:
        cal["jars_pct_wv"] = tuple(float(x) for x in cal["jars_pct_wv"])
    if "window_min" in cal:
        cal["window_min"] = tuple(float(x) for x in cal["window_min"])
    if cal.get("curve") is not None:
        cal["curve"] = CalibrationCurve.from_dict(cal["curve"])

    ana = dict(doc.get("analysis") or {})
    if "fit_windows_s" in ana:
        ana["fit_windows_s"] = _pairs(ana["fit_windows_s"], "analysis.fit_windows_s")
    if ana.get("plateau_window_s") is not None:
        ana["plateau_window_s"] = _pairs([ana["plateau_window_s"]], "analysis.plateau_window_s")[0]

    faults = dict(doc.get("faults") or {})
    for key in ("service_outages_s", "disconnects_s"):
        if key in faults:
            faults[key] = _pairs(faults[key], f"faults.{key}")
    if "lost_responses" in faults:
        faults["lost_responses"] = tuple(int(x) for x in faults["lost_responses"])

    try:
        return ScenarioConfig(
            scenario=doc["scenario"],
            seed=int(doc.get("seed", 0)),
            subjects=tuple(subjects),
            env=_build(EnvState, doc.get("env"), "env"),
            protocol=_build(ProtocolSpec, doc.get("protocol"), "protocol"),
            device=_build(DeviceSpec, doc.get("device"), "device"),
            calibration=_build(CalibrationSpec, cal, "calibration"),
            analysis=_build(AnalysisSpec, ana, "analysis"),
            faults=_build(FaultSpec, faults, "faults"),
            output_dir=doc.get("output_dir"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInput):
            raise
        raise InvalidInput(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise InvalidInput(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidInput(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(doc)
