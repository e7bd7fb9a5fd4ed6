#!/usr/bin/env python3
"""TACg AUC against perspiration rate for one subject and one drink.

BAC is unaffected by perspiration, so the BAC column stays flat while the
TACg column moves. Writes a CSV to stdout.
"""
import argparse
import dataclasses
import sys

from tacnet.harness import run_session
from tacnet.physio import SubjectParams
from tacnet.scenarios import from_dict


def main(argv=None):
    ap = argparse.ArgumentParser(description="perspiration sweep")
    ap.add_argument("--rates", type=float, nargs="+", default=[20.8, 50, 100, 200, 400, 800])
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    print("perspiration_mL_hr,auc_bac_mg_dL_min,auc_tacg_corrected_ppm_min,peak_delay_s")
    for rate in args.rates:
        params = dataclasses.asdict(SubjectParams(perspiration_mL_hr=rate))
        cfg = from_dict({"scenario": "one_drink", "seed": args.seed,
                         "subjects": [{"label": "s", "drinks": 1, "params": params}],
                         "calibration": {"curve": {"slope_counts_per_ppm": 185.0,
                                                   "intercept_counts": 273.0}}})
        m = run_session(cfg, plots=False).metrics["subjects"]["s"]
        print(f"{rate},{m['auc_bac_mg_dL_min']:.2f},{m['auc_tacg_corrected_ppm_min']:.2f},"
              f"{m['peak_delay_s']:.0f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
