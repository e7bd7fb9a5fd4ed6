"""Figures and CSV tables for session datasets."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MINUTE_COLUMNS = ("t_s", "alcohol_counts", "temp_c", "rh_pct", "tacg_raw_ppm", "tacg_corrected_ppm")
BREATH_COLUMNS = ("t_s", "bac_mg_dL")
# keeps PNG bytes free of version strings
_PNG_META = {"Software": None}


@dataclass
class SessionDataset:
    label: str
    t_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alcohol_counts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    temp_C: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rh_pct: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tacg_raw_ppm: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tacg_corrected_ppm: np.ndarray = field(default_factory=lambda: np.zeros(0))
    breath_t_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    breath_bac: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _fmt(x) -> str:
    return repr(float(x))


def write_dataset_csv(ds: SessionDataset, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    minutes = os.path.join(out_dir, f"{ds.label}_minutes.csv")
    with open(minutes, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MINUTE_COLUMNS)
        for row in zip(ds.t_s, ds.alcohol_counts, ds.temp_C, ds.rh_pct, ds.tacg_raw_ppm,
                       ds.tacg_corrected_ppm):
            w.writerow([_fmt(v) for v in row])
    breath = os.path.join(out_dir, f"{ds.label}_breathalyzer.csv")
    with open(breath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BREATH_COLUMNS)
        for row in zip(ds.breath_t_s, ds.breath_bac):
            w.writerow([_fmt(v) for v in row])
    return [minutes, breath]


def _read_columns(path, columns):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != columns:
        raise ValueError(f"{path}: expected header {','.join(columns)}")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(columns))
    return [data[:, k] for k in range(len(columns))]


def load_datasets(out_dir) -> list[SessionDataset]:
    """Rebuild datasets from the `<label>_minutes.csv` / `<label>_breathalyzer.csv` pairs."""
    out = []
    for fn in sorted(os.listdir(out_dir)):
        if not fn.endswith("_minutes.csv"):
            continue
        label = fn[: -len("_minutes.csv")]
        cols = _read_columns(os.path.join(out_dir, fn), MINUTE_COLUMNS)
        ds = SessionDataset(label, *cols)
        breath = os.path.join(out_dir, f"{label}_breathalyzer.csv")
        if os.path.exists(breath):
            ds.breath_t_s, ds.breath_bac = _read_columns(breath, BREATH_COLUMNS)
        out.append(ds)
    return out


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def emit_plots(datasets: list[SessionDataset], out_dir) -> list[str]:
    """PNG figures plus CSV tables; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"{out_dir} is not writable")
    written = []
    if not datasets:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.set_xlabel("time (h)")
        ax.set_ylabel("TACg (ppm)")
        ax.set_title("no data")
        path = os.path.join(out_dir, "empty.png")
        _save(fig, path)
        return [path]
    for ds in datasets:
        written += write_dataset_csv(ds, out_dir)
        hours = ds.t_s / 3600.0

        fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
        axes[0].plot(hours, ds.alcohol_counts, lw=0.8)
        axes[0].set_ylabel("alcohol (counts)")
        axes[1].plot(hours, ds.temp_C, lw=0.8, color="tab:red")
        axes[1].set_ylabel("temp (C)")
        axes[2].plot(hours, ds.rh_pct, lw=0.8, color="tab:green")
        axes[2].set_ylabel("RH (%)")
        axes[2].set_xlabel("time (h)")
        fig.suptitle(ds.label)
        path = os.path.join(out_dir, f"{ds.label}_sensors.png")
        _save(fig, path)
        written.append(path)

        fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
        top.plot(ds.breath_t_s / 3600.0, ds.breath_bac, "o-", ms=3, color="tab:purple")
        top.set_ylabel("BAC (mg/dL)")
        bottom.plot(hours, ds.tacg_raw_ppm, lw=0.6, color="0.6", label="raw")
        bottom.plot(hours, ds.tacg_corrected_ppm, lw=0.9, color="tab:blue", label="corrected")
        bottom.set_ylabel("TACg (ppm)")
        bottom.set_xlabel("time (h)")
        bottom.legend(loc="upper right", fontsize=8)
        fig.suptitle(ds.label)
        path = os.path.join(out_dir, f"{ds.label}_bac_tacg.png")
        _save(fig, path)
        written.append(path)
    return written
