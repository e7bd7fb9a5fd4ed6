"""Desk-scale reproductions: emulator -> gateway -> service on one virtual clock."""
from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import analytics as A
from .clock import VirtualClock
from .device.emulator import DeviceConfig, DeviceEmulator
from .device.frontend import GainTable
from .device.transport import InProcessRegistry
from .errors import ServiceUnavailable, TacnetError
from .gateway import Gateway
from .physio import EnvSchedule, JarModel, SessionModel, henry_gas_ppm, standard_drinks
from .plots import SessionDataset, emit_plots, write_dataset_csv
from .scenarios import ScenarioConfig
from .service import HttpServiceClient, SeriesStore, ServiceServer

log = logging.getLogger(__name__)

MG_DL_PER_PCT_WV = 1000.0


class FaultyServiceClient:
    """Service client wrapper that injects outages and lost responses."""

    def __init__(self, inner, clock: VirtualClock, outages_s=(), lost_responses=()):
        self.inner = inner
        self.clock = clock
        self.outages_s = tuple(outages_s)
        self.lost_responses = set(lost_responses)
        self.calls = 0
        self.injected = 0
        self.duplicates = 0

    def write(self, payload):
        idx = self.calls
        self.calls += 1
        t = self.clock.now_s
        if any(lo <= t < hi for lo, hi in self.outages_s):
            self.injected += 1
            raise ServiceUnavailable("injected outage")
        result = self.inner.write(payload)
        self.duplicates += result.get("duplicates", 0)
        if idx in self.lost_responses:
            self.injected += 1
            raise ServiceUnavailable("injected lost response")
        return result

    def query(self, *args, **kwargs):
        return self.inner.query(*args, **kwargs)

    def export_csv(self, *args, **kwargs):
        return self.inner.export_csv(*args, **kwargs)


# ---------------------------------------------------------------- calibration

@dataclass
class JarResult:
    pct_wv: float
    liquid_mg_dL: float
    equilibrium_ppm: float
    mean_counts: float
    window_min: tuple[float, float]
    extended: bool


@dataclass
class CalibrationReport:
    curve: A.CalibrationCurve
    jars: list[JarResult]
    ground_truth_slope: float

    def to_dict(self) -> dict:
        return {
            "curve": self.curve.to_dict(),
            "ground_truth_slope_counts_per_ppm": self.ground_truth_slope,
            "slope_error_rel": self.curve.slope_counts_per_ppm / self.ground_truth_slope - 1.0,
            "jars": [{"pct_wv": j.pct_wv, "liquid_mg_dL": j.liquid_mg_dL,
                      "equilibrium_ppm": j.equilibrium_ppm, "mean_counts": j.mean_counts,
                      "window_min": list(j.window_min), "extended": j.extended} for j in self.jars],
        }


def _device_config(cfg: ScenarioConfig, name: str, seed: int) -> DeviceConfig:
    d = cfg.device
    return DeviceConfig(name=name, slope_counts_per_ppm=d.slope_counts_per_ppm,
                        noise_clean_counts=d.noise_clean_counts,
                        noise_on_body_counts=d.noise_on_body_counts, seed=seed)


def _plateaued(means: np.ndarray, offset: float, noise: float) -> bool:
    if means.size < 2:
        return True
    slope = np.polyfit(np.arange(means.size, dtype=float), means, 1)[0]
    change = abs(slope) * (means.size - 1)
    return change <= max(0.005 * abs(means.mean() - offset), 4.0 * noise)


def run_calibration_routine(cfg: ScenarioConfig) -> CalibrationReport:
    """Six sealed jars in sequence; window means against Henry-equilibrium ppm."""
    cal = cfg.calibration
    device = DeviceEmulator(_device_config(cfg, f"{cfg.device.name_prefix}-CAL", cfg.seed))
    table = device.table
    lo_min, hi_min = cal.window_min
    jars, points = [], []
    for pct in cal.jars_pct_wv:
        liquid = pct * MG_DL_PER_PCT_WV
        duration = cal.jar_duration_s + cal.max_extensions * 300
        jar = JarModel(liquid, duration, temp_C=cfg.env.ambient_temp_C)
        minutes = []
        lo, hi = lo_min, hi_min
        extended = False
        for k, obs in enumerate(jar):
            if k == duration:
                break
            before = device.last_id
            device.tick(obs)
            if device.last_id != before:
                minutes.append(device.fifo.read_range(device.last_id, device.last_id)[0].v1)
            if len(minutes) == int(hi) and (k + 1) % 60 == 0:
                window = np.array(minutes[int(lo):int(hi)], dtype=float)
                if _plateaued(window, table.offset_counts, cfg.device.noise_clean_counts):
                    break
                if hi * 60 >= duration:
                    log.warning("jar %.2f%% w/v never plateaued; using last window", pct)
                    break
                log.warning("jar %.2f%% w/v not plateaued at %g min; extending 5 min", pct, hi)
                lo, hi, extended = lo + 5, hi + 5, True
        # finish the open minute so the next jar starts on a record boundary
        while device.uptime_s % 60:
            device.tick(obs)
        window = np.array(minutes[int(lo):int(hi)], dtype=float)
        ppm = henry_gas_ppm(liquid, cfg.env.ambient_temp_C)
        jars.append(JarResult(pct, liquid, float(ppm), float(window.mean()), (lo, hi), extended))
        points.append((ppm, float(window.mean())))
    curve = A.fit_calibration(points, table.ref_index)
    return CalibrationReport(curve, jars, cfg.device.slope_counts_per_ppm)


# ---------------------------------------------------------------- sessions

@dataclass
class SubjectRun:
    label: str
    dataset: SessionDataset
    metrics: dict
    export_csv: str


@dataclass
class SessionResult:
    scenario: str
    metrics: dict
    runs: list[SubjectRun] = field(default_factory=list)
    calibration: CalibrationReport | None = None


def breathalyzer(t_grid: np.ndarray, bac: np.ndarray, start_s: float, interval_s: float,
                 rng: np.random.Generator, sd: float = 1.0, clip: float = 2.0):
    """Readings every `interval_s` from `start_s` until a zero follows a positive reading."""
    ts, vals = [], []
    seen_positive = False
    t = start_s
    while t <= t_grid[-1]:
        truth = float(bac[int(t)])
        reading = 0.0 if truth <= 0 else max(0.0, truth + float(np.clip(rng.normal(0, sd), -clip, clip)))
        ts.append(float(t))
        vals.append(reading)
        if reading > 0:
            seen_positive = True
        elif seen_positive:
            break
        t += interval_s
    return np.array(ts), np.array(vals)


def resolve_windows(windows, duration_s: float):
    """Negative window starts count back from the end of the session."""
    out = []
    for lo, hi in windows:
        if lo < 0:
            lo, hi = duration_s + lo, duration_s + hi
        out.append((lo, hi))
    return out


def analyze_series(cfg: ScenarioConfig, t_s, counts, curve: A.CalibrationCurve,
                   breath_t=None, breath_bac=None, drinking: bool = True):
    """Counts at the reference gain -> raw and drift-corrected ppm plus metrics."""
    proto = cfg.protocol
    duration = proto.duration_s
    don_s = proto.off_body_s
    drink_s = don_s + proto.baseline_s
    table = GainTable()
    t_s = np.asarray(t_s, dtype=float)
    counts = np.asarray(counts, dtype=float)
    raw_ppm = np.asarray(A.adc_to_ppm(counts, table.ref_index, curve, table), dtype=float)
    windows = resolve_windows(cfg.analysis.fit_windows_s, duration)
    corrected = A.remove_baseline(t_s, raw_ppm, windows)
    m = {"fit_windows_s": [list(w) for w in windows]}
    if drinking:
        after = t_s >= drink_s
        m["auc_tacg_corrected_ppm_min"] = A.auc(t_s[after], corrected[after])
        m["auc_tacg_raw_ppm_min"] = A.auc(t_s[after], raw_ppm[after])
        m["tacg_peak_time_s"], m["tacg_peak_ppm"] = A.peak(t_s[after], corrected[after])
        if breath_t is not None and len(breath_t):
            m["auc_bac_mg_dL_min"] = A.auc(breath_t, breath_bac)
            m["bac_peak_time_s"], m["bac_peak_mg_dL"] = A.peak(breath_t, breath_bac)
            m["peak_delay_s"] = m["tacg_peak_time_s"] - m["bac_peak_time_s"]
        return raw_ppm, corrected, m
    if don_s >= 120:
        st = A.baseline_stats(t_s, counts, (0.0, float(don_s)), curve)
        m["off_body"] = {"mean_counts": st.mean_counts, "sd_counts": st.sd_counts,
                         "mean_ppm": st.mean_ppm, "sd_ppm": st.sd_ppm}
    plateau = cfg.analysis.plateau_window_s or (don_s + 3600.0, float(duration))
    st = A.baseline_stats(t_s, counts, plateau, curve)
    sel = (t_s >= plateau[0]) & (t_s <= plateau[1])
    rms_raw = float(np.sqrt(np.mean(raw_ppm[sel] ** 2)))
    rms_corr = float(np.sqrt(np.mean(corrected[sel] ** 2)))
    m["plateau"] = {"mean_counts": st.mean_counts, "sd_counts": st.sd_counts,
                    "mean_ppm": st.mean_ppm, "sd_ppm": st.sd_ppm, "window_s": list(plateau),
                    "rms_raw_ppm": rms_raw, "rms_corrected_ppm": rms_corr,
                    "rms_reduction": 1.0 - rms_corr / rms_raw if rms_raw > 0 else 0.0}
    return raw_ppm, corrected, m


def _run_subject(cfg: ScenarioConfig, idx: int, curve: A.CalibrationCurve, work_dir: str) -> SubjectRun:
    subject = cfg.subjects[idx]
    proto = cfg.protocol
    duration = proto.duration_s
    don_s = proto.off_body_s
    drink_s = don_s + proto.baseline_s
    drinks = standard_drinks(subject.drinks, drink_s, proto.drink_duration_s) if subject.drinks else []
    model = SessionModel(subject.params, drinks, duration, env=EnvSchedule([(0.0, cfg.env)]),
                         donned_at_s=don_s)

    clock = VirtualClock()
    name = f"{cfg.device.name_prefix}-{idx + 1:02d}"
    device = DeviceEmulator(_device_config(cfg, name, cfg.seed * 1000 + idx + 1))
    registry = InProcessRegistry()
    registry.add(device)
    store = SeriesStore(os.path.join(work_dir, "service"))
    server = ServiceServer(store).start()
    gateway = None
    try:
        client = FaultyServiceClient(HttpServiceClient(server.url), clock,
                                     cfg.faults.service_outages_s, cfg.faults.lost_responses)
        gateway = Gateway(registry, client, os.path.join(work_dir, "gateway"), clock,
                          filter_prefix=cfg.device.name_prefix, batch_size=600)
        if name not in [d.device_name for d in gateway.scan()]:
            raise TacnetError(f"{name} not found by scan")
        session = gateway.connect(name)
        session.subscribe()
        realtime_received = 0
        backfills = []
        disconnects = sorted(cfg.faults.disconnects_s)
        for k, obs in enumerate(model):
            if k == duration:
                break
            device.tick(obs)
            if session is not None:
                session.poll()
            for lo, hi in disconnects:
                if session is not None and k == int(lo):
                    realtime_received += session.realtime_received
                    session.close()
                    session = None
                elif session is None and k == int(hi):
                    session = gateway.connect(name)
                    session.subscribe()
                    backfills.append(session.backfill())
            if (k + 1) % 60 == 0:
                gateway.flush()
            clock.advance(1)
        if session is None:
            session = gateway.connect(name)
        backfills.append(session.backfill())
        realtime_received += session.realtime_received
        session.close()
        for _ in range(len(cfg.faults.lost_responses) + 3):
            if gateway.flush():
                break
        else:
            raise TacnetError("spool did not drain")
        bf = client.query(name, source="backfill")
        rt_count = len(client.query(name, source="realtime", fields=("alcohol_raw",)))
        export = client.export_csv(name)
    finally:
        if gateway is not None:
            gateway.close()
        server.stop()

    flash = device.fifo.records()
    # minute records are stamped at the end of their minute; analyse at the centre
    t_s = np.array([clock.session_seconds(p["t_ns"]) - 30.0 for p in bf])
    counts = np.array([p["alcohol_raw"] for p in bf])
    temp = np.array([p["temp_c"] for p in bf])
    rh = np.array([p["rh_pct"] for p in bf])

    rng = np.random.default_rng([cfg.seed, idx, 7])
    if drinks:
        b_t, b_v = breathalyzer(model.t_grid, model.bac, drink_s, proto.breathalyzer_interval_s, rng,
                                proto.breathalyzer_sd_mg_dL, proto.breathalyzer_clip_mg_dL)
    else:
        b_t, b_v = np.zeros(0), np.zeros(0)
    raw_ppm, corrected, analysis = analyze_series(cfg, t_s, counts, curve, b_t, b_v,
                                                  drinking=bool(drinks))
    ds = SessionDataset(subject.label, t_s, counts, temp, rh, raw_ppm, corrected, b_t, b_v)
    m = {
        "device": name,
        "minutes_worn": duration // 60,
        "records_written": device.records_written,
        "backfill_points": len(bf),
        "backfill_unique_t": len({p["t_ns"] for p in bf}),
        "backfill_gaps": sum(len(r.gaps) for r in backfills),
        # service backfill, in time order, against the flash contents record by record
        "backfill_matches_flash": [p["alcohol_raw"] for p in bf] == [r.v1 for r in flash],
        "realtime_points_service": rt_count,
        "realtime_points_gateway": realtime_received,
        "measurement_pushes": device.pushes_sent,
        "service_duplicates_rejected": client.duplicates,
        "injected_faults": client.injected,
    }
    m.update(analysis)
    if drinks:
        m["auc_bac_truth_mg_dL_min"] = A.auc(model.t_grid, model.bac)
    return SubjectRun(subject.label, ds, m, export)


def run_session(cfg: ScenarioConfig, out_dir: str | None = None, plots: bool = True) -> SessionResult:
    """Run every subject of a session scenario and write metrics, tables and figures."""
    if cfg.scenario == "calibration_routine":
        raise TacnetError("use run_calibration_routine for calibration scenarios")
    out_dir = out_dir or cfg.output_dir
    report = None
    if cfg.calibration.curve is not None:
        curve = cfg.calibration.curve
    else:
        report = run_calibration_routine(cfg)
        curve = report.curve
    scratch = None
    if out_dir:
        work = os.path.join(out_dir, "work")
        shutil.rmtree(work, ignore_errors=True)
    else:
        scratch = tempfile.TemporaryDirectory(prefix="tacnet-")
        work = scratch.name
    try:
        runs = [_run_subject(cfg, idx, curve, os.path.join(work, s.label))
                for idx, s in enumerate(cfg.subjects)]
    finally:
        if scratch is not None:
            scratch.cleanup()
    metrics = {"scenario": cfg.scenario, "seed": cfg.seed, "calibration": curve.to_dict(),
               "subjects": {r.label: r.metrics for r in runs}}
    if len(runs) == 2 and all("auc_tacg_corrected_ppm_min" in r.metrics for r in runs):
        a, b = (r.metrics for r in runs)
        metrics["ratios"] = {
            "numerator": runs[0].label, "denominator": runs[1].label,
            "bac_auc_ratio": A.auc_ratio(a["auc_bac_mg_dL_min"], b["auc_bac_mg_dL_min"]),
            "tacg_auc_ratio": A.auc_ratio(a["auc_tacg_corrected_ppm_min"], b["auc_tacg_corrected_ppm_min"]),
            "tacg_auc_ratio_raw": A.auc_ratio(a["auc_tacg_raw_ppm_min"], b["auc_tacg_raw_ppm_min"]),
        }
    result = SessionResult(cfg.scenario, metrics, runs, report)
    if out_dir:
        write_session_outputs(result, out_dir, plots)
    return result


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_session_outputs(result: SessionResult, out_dir: str, plots: bool = True) -> None:
    os.makedirs(out_dir, exist_ok=True)
    dump_json(result.metrics, os.path.join(out_dir, "metrics.json"))
    if result.calibration is not None:
        dump_json(result.calibration.to_dict(), os.path.join(out_dir, "calibration.json"))
    for r in result.runs:
        with open(os.path.join(out_dir, f"{r.label}_service_export.csv"), "w") as fh:
            fh.write(r.export_csv)
    if plots:
        emit_plots([r.dataset for r in result.runs], out_dir)
    else:
        for r in result.runs:
            write_dataset_csv(r.dataset, out_dir)
