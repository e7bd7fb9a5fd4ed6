import json
import os
import subprocess
import sys
import time
from urllib.request import urlopen

import pytest
import yaml

from tacnet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, gateway_main, main

SHORT = {"scenario": "one_drink", "seed": 3, "subjects": [{"label": "s", "drinks": 1}],
         "protocol": {"baseline_s": 1800, "drink_duration_s": 300, "wear_after_s": 7200},
         "analysis": {"fit_windows_s": [[600, 1800], [-1200, 0]]},
         "calibration": {"curve": {"slope_counts_per_ppm": 185.0, "intercept_counts": 273.0}}}


def write_cfg(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"scenario": "one_drink", "subjects": [{"label": "a", "drinks": 3}]})
    assert main(["session", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "drinks = 1" in capsys.readouterr().err
    assert main(["session", "--config", str(tmp_path / "nope.yaml"), "--out", "x"]) == EXIT_VALIDATION
    cal = write_cfg(tmp_path, {"scenario": "calibration_routine"}, "cal.yaml")
    assert main(["session", "--config", cal, "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_session_analyze_plot(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SHORT)
    out = tmp_path / "out"
    assert main(["session", "--config", cfg, "--out", str(out), "--no-plots"]) == EXIT_OK
    assert "records=155" in capsys.readouterr().out
    metrics = json.loads((out / "metrics.json").read_text())["subjects"]["s"]

    assert main(["analyze", "--config", cfg, "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "analysis.json").read_text())["series"]["s"]
    for key in ("auc_tacg_corrected_ppm_min", "tacg_peak_time_s", "peak_delay_s", "auc_bac_mg_dL_min"):
        assert report[key] == pytest.approx(metrics[key], rel=1e-9), key
    assert (out / "s_corrected.csv").read_text().startswith("t_s,tacg_raw_ppm,tacg_corrected_ppm\n")

    assert main(["plot", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert (out / "s_sensors.png").exists() and (out / "s_bac_tacg.png").exists()
    assert main(["plot", "--config", cfg, "--out", str(tmp_path / "none")]) == EXIT_VALIDATION


def test_analyze_needs_inputs(tmp_path):
    cfg = write_cfg(tmp_path, SHORT)
    (tmp_path / "empty").mkdir()
    assert main(["analyze", "--config", cfg, "--out", str(tmp_path / "empty")]) == EXIT_VALIDATION
    bad = tmp_path / "x_service_export.csv"
    bad.write_text("a,b\n")
    assert main(["analyze", "--config", cfg, "--out", str(tmp_path), "--input", str(bad)]) == EXIT_VALIDATION


def test_calibrate(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"scenario": "calibration_routine", "seed": 2})
    assert main(["calibrate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("slope=")
    doc = json.loads((tmp_path / "calibration.json").read_text())
    assert abs(doc["slope_error_rel"]) < 0.01


def test_gateway_without_registry(tmp_path, capsys):
    reg = str(tmp_path / "missing")
    assert gateway_main(["--registry", reg, "scan"]) == EXIT_OK
    assert capsys.readouterr().out == ""
    assert gateway_main(["--registry", reg, "--spool-dir", str(tmp_path / "sp"),
                         "backfill", "TAC-01"]) == EXIT_RUNTIME


def _wait_for(pred, timeout=20.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(0.1)
    return False


@pytest.mark.slow
def test_processes_over_tcp(tmp_path):
    """serve + device + gateway as separate processes."""
    reg, spool, data = tmp_path / "reg", tmp_path / "spool", tmp_path / "data"
    exe = [sys.executable, "-m", "tacnet.cli"]
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    svc = subprocess.Popen(exe + ["serve", "--data-dir", str(data), "--port", "0"],
                           stdout=subprocess.PIPE, text=True, env=env)
    dev = subprocess.Popen(exe + ["device", "--name", "TAC-05", "--registry", str(reg),
                                  "--acceleration", "600", "--fifo-path", str(tmp_path / "f.bin")],
                           stdout=subprocess.PIPE, text=True, env=env)
    try:
        url = svc.stdout.readline().strip()
        assert url.startswith("http://")
        assert _wait_for(lambda: (reg / "TAC-05.json").exists())
        time.sleep(1.5)  # about 15 virtual minutes
        common = exe + ["gateway", "--registry", str(reg), "--service-url", url,
                        "--spool-dir", str(spool)]
        scan = subprocess.run(common + ["scan"], capture_output=True, text=True, env=env, timeout=30)
        assert scan.returncode == 0
        assert json.loads(scan.stdout.splitlines()[0])["device_name"] == "TAC-05"
        first = subprocess.run(common + ["backfill", "TAC-05"], capture_output=True, text=True,
                               env=env, timeout=30)
        assert first.returncode == 0, first.stderr
        n1 = json.loads(first.stdout)["points"]
        assert n1 >= 5
        again = subprocess.run(common + ["backfill", "TAC-05", "--redownload"], capture_output=True,
                               text=True, env=env, timeout=30)
        assert again.returncode == 0, again.stderr
        doc = json.loads(again.stdout)
        # the device kept logging in between; only those new minutes are uploaded
        assert doc["skipped"] == n1
        with urlopen(url + "/query?device=TAC-05&source=backfill") as resp:
            pts = json.loads(resp.read())["points"]
        assert len(pts) == n1 + doc["points"] == len({p["t_ns"] for p in pts})
        rows = (spool / "TAC-05.csv").read_text().splitlines()[1:]
        first_ts = [int(r.split(",")[0]) for r in rows][:n1]
        assert all(b - a == 60 * 10**9 for a, b in zip(first_ts, first_ts[1:]))
        stream = subprocess.run(common + ["stream", "TAC-05", "--duration", "1", "--flush-every", "10"],
                                capture_output=True, text=True, env=env, timeout=30)
        assert stream.returncode == 0, stream.stderr
        assert int(stream.stdout.split(": ")[1].split()[0]) > 100
    finally:
        for p in (dev, svc):
            p.terminate()
            p.wait(timeout=10)
