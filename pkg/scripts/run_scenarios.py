#!/usr/bin/env python3
"""Run the shipped scenario configs and print a one-line summary per run.

    python scripts/run_scenarios.py --out results/
"""
import argparse
import json
import os
import sys
import time

from tacnet.harness import dump_json, run_calibration_routine, run_session
from tacnet.scenarios import load_config

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT = ["calibration", "one_drink", "two_drink", "baseline", "clothing", "interpersonal", "faults"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", default=DEFAULT)
    ap.add_argument("--configs", default=os.path.join(HERE, "..", "configs"))
    ap.add_argument("--out", default="results")
    ap.add_argument("--no-plots", action="store_true")
    args = ap.parse_args(argv)
    for name in args.names:
        cfg = load_config(os.path.join(args.configs, f"{name}.yaml"))
        out = os.path.join(args.out, name)
        os.makedirs(out, exist_ok=True)
        t0 = time.perf_counter()
        if cfg.scenario == "calibration_routine":
            rep = run_calibration_routine(cfg)
            dump_json(rep.to_dict(), os.path.join(out, "calibration.json"))
            summary = rep.to_dict()["curve"]
        else:
            res = run_session(cfg, out, plots=not args.no_plots)
            summary = res.metrics.get("ratios") or {
                k: {f: m.get(f) for f in ("peak_delay_s", "auc_tacg_corrected_ppm_min", "plateau")
                    if f in m} for k, m in res.metrics["subjects"].items()}
        print(f"{name:14s} {time.perf_counter() - t0:5.1f} s  {json.dumps(summary, sort_keys=True)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
