"""Command line entry points.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from .errors import InvalidInput, TacnetError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("tacnet")


# ---------------------------------------------------------------- harness verbs

def _cmd_calibrate(args):
    from .harness import dump_json, run_calibration_routine
    from .scenarios import load_config
    cfg = load_config(args.config)
    report = run_calibration_routine(cfg)
    os.makedirs(args.out, exist_ok=True)
    dump_json(report.to_dict(), os.path.join(args.out, "calibration.json"))
    c = report.curve
    print(f"slope={c.slope_counts_per_ppm:.3f} counts/ppm intercept={c.intercept_counts:.2f} "
          f"r2={c.fit_r2:.6f}")


def _cmd_session(args):
    from .harness import run_session
    from .scenarios import load_config
    cfg = load_config(args.config)
    if cfg.scenario == "calibration_routine":
        raise InvalidInput("calibration_routine configs run with `tacnet calibrate`")
    result = run_session(cfg, args.out, plots=not args.no_plots)
    print(json.dumps(result.metrics.get("ratios", {}), sort_keys=True))
    for label, m in result.metrics["subjects"].items():
        print(f"{label}: records={m['records_written']} backfilled={m['backfill_points']} "
              f"peak_delay_s={m.get('peak_delay_s')}")


def _load_curve(args, cfg):
    from .analytics import CalibrationCurve
    path = args.calibration or os.path.join(args.out, "calibration.json")
    if cfg.calibration.curve is not None and not args.calibration:
        return cfg.calibration.curve
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise InvalidInput(f"cannot read calibration {path}: {exc}") from exc
    return CalibrationCurve.from_dict(doc.get("curve", doc))


def _read_export(path):
    from .clock import DEFAULT_EPOCH_NS
    from .service import CSV_HEADER
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise InvalidInput(f"{path}: not a service CSV export")
    rows = [r for r in rows[1:] if r[5] == "backfill"]
    t_s = np.array([(int(r[0]) - DEFAULT_EPOCH_NS) / 1e9 - 30.0 for r in rows])
    return t_s, np.array([float(r[2]) for r in rows])


def _cmd_analyze(args):
    from .harness import analyze_series, dump_json
    from .plots import BREATH_COLUMNS, _read_columns
    from .scenarios import load_config
    cfg = load_config(args.config)
    curve = _load_curve(args, cfg)
    inputs = args.input or sorted(os.path.join(args.out, f) for f in os.listdir(args.out)
                                  if f.endswith("_service_export.csv"))
    if not inputs:
        raise InvalidInput("no service exports given or found in --out")
    report = {"calibration": curve.to_dict(), "series": {}}
    for path in inputs:
        label = os.path.basename(path).removesuffix(".csv").removesuffix("_service_export")
        t_s, counts = _read_export(path)
        breath = os.path.join(os.path.dirname(path), f"{label}_breathalyzer.csv")
        b_t = b_v = None
        if os.path.exists(breath):
            b_t, b_v = _read_columns(breath, BREATH_COLUMNS)
        drinking = any(s.drinks for s in cfg.subjects)
        raw, corr, m = analyze_series(cfg, t_s, counts, curve, b_t, b_v, drinking)
        report["series"][label] = m
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("t_s", "tacg_raw_ppm", "tacg_corrected_ppm"))
        for row in zip(t_s, raw, corr):
            w.writerow([repr(float(v)) for v in row])
        with open(os.path.join(args.out, f"{label}_corrected.csv"), "w") as fh:
            fh.write(out.getvalue())
    dump_json(report, os.path.join(args.out, "analysis.json"))
    print(json.dumps(report["series"], sort_keys=True))


def _cmd_plot(args):
    from .plots import emit_plots, load_datasets
    from .scenarios import load_config
    load_config(args.config)
    if not os.path.isdir(args.out):
        raise InvalidInput(f"{args.out} is not a directory")
    for path in emit_plots(load_datasets(args.out), args.out):
        print(path)


# ---------------------------------------------------------------- components

def _cmd_serve(args):
    from .service import SeriesStore, ServiceServer
    server = ServiceServer(SeriesStore(args.data_dir, fsync=args.fsync), args.host, args.port)
    server.start()
    print(server.url, flush=True)
    try:
        server.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


def _cmd_device(args):
    from .clock import VirtualClock
    from .device.emulator import DeviceConfig, DeviceEmulator
    from .device.fifo import FlashFifo
    from .device.transport import DeviceServer, DirectoryRegistry
    from .physio import EnvSchedule, SessionModel, standard_drinks
    from .scenarios import load_config
    cfg = load_config(args.config) if args.config else None
    if cfg is not None:
        subj = cfg.subjects[0]
        proto = cfg.protocol
        drinks = standard_drinks(subj.drinks, proto.off_body_s + proto.baseline_s,
                                 proto.drink_duration_s) if subj.drinks else []
        obs = SessionModel(subj.params, drinks, proto.duration_s, EnvSchedule([(0.0, cfg.env)]),
                           donned_at_s=proto.off_body_s)
    else:
        from .physio import SubjectParams
        obs = SessionModel(SubjectParams(), [], 10**7)
    fifo = FlashFifo(args.fifo_path) if args.fifo_path else None
    device = DeviceEmulator(DeviceConfig(name=args.name, seed=args.seed), fifo)
    clock = VirtualClock(acceleration=args.acceleration)
    server = DeviceServer(device, iter(obs), clock, args.host, args.port,
                          DirectoryRegistry(args.registry), args.max_ticks)
    server.start()
    print(f"{args.name} listening on {server.host}:{server.port}", flush=True)
    try:
        server.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        if fifo is not None:
            fifo.close()


def _gateway(args):
    from .device.transport import DirectoryRegistry
    from .gateway import Gateway
    from .service import HttpServiceClient
    return Gateway(DirectoryRegistry(args.registry), HttpServiceClient(args.service_url),
                   args.spool_dir, filter_prefix=args.filter_prefix)


def _cmd_gateway_scan(args):
    gw = _gateway(args)
    try:
        for d in gw.scan():
            print(json.dumps({"device_name": d.device_name, "transport_address": d.transport_address,
                              "latest_rec_id": d.latest_rec_id}))
    finally:
        gw.close()


def _cmd_gateway_stream(args):
    gw = _gateway(args)
    session = None
    try:
        session = gw.connect(args.device)
        session.subscribe()
        n = 0
        for _ in session.stream(args.duration):
            n += 1
            if n % args.flush_every == 0:
                gw.flush()
        gw.flush()
        state = "disconnected" if session.disconnected else "stopped"
        print(f"{args.device}: {n} realtime points, {state}")
    finally:
        if session is not None:
            session.close()
        gw.close()


def _cmd_gateway_backfill(args):
    gw = _gateway(args)
    session = None
    try:
        session = gw.connect(args.device)
        res = session.backfill(redownload=args.redownload)
        ok = gw.flush()
        print(json.dumps({"device": args.device, "latest_id": res.latest_id, "points": len(res.points),
                          "skipped": res.skipped, "gaps": res.gaps, "uploaded": ok}))
        if not ok:
            raise TacnetError("service unreachable; points remain spooled")
    finally:
        if session is not None:
            session.close()
        gw.close()


def _add_gateway_parser(sub):
    p = sub.add_parser("gateway", help="scan, stream or backfill devices")
    p.add_argument("--registry", default=".tacnet/registry", help="device advertisement directory")
    p.add_argument("--service-url", default="http://127.0.0.1:8086")
    p.add_argument("--spool-dir", default=".tacnet/spool")
    p.add_argument("--filter-prefix", default="TAC")
    gsub = p.add_subparsers(dest="gateway_cmd", required=True)
    gsub.add_parser("scan").set_defaults(func=_cmd_gateway_scan)
    s = gsub.add_parser("stream")
    s.add_argument("device")
    s.add_argument("--duration", type=float, default=None, help="seconds of real time")
    s.add_argument("--flush-every", type=int, default=60)
    s.set_defaults(func=_cmd_gateway_stream)
    b = gsub.add_parser("backfill")
    b.add_argument("device")
    b.add_argument("--redownload", action="store_true")
    b.set_defaults(func=_cmd_gateway_backfill)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tacnet", description="Transdermal alcohol sensing testbed")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name, func, help_ in (("calibrate", _cmd_calibrate, "run the six-jar calibration routine"),
                              ("session", _cmd_session, "run a drinking or baseline scenario"),
                              ("analyze", _cmd_analyze, "recompute metrics from service exports"),
                              ("plot", _cmd_plot, "redraw figures from session tables")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        if name == "session":
            p.add_argument("--no-plots", action="store_true")
        if name == "analyze":
            p.add_argument("--input", nargs="*", help="service CSV exports")
            p.add_argument("--calibration", help="calibration.json (default: <out>/calibration.json)")
        p.set_defaults(func=func)

    p = sub.add_parser("serve", help="run the time-series service")
    p.add_argument("--data-dir", default=".tacnet/service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8086)
    p.add_argument("--fsync", action="store_true")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("device", help="run an emulated wearable over TCP")
    p.add_argument("--name", default="TAC-01")
    p.add_argument("--config", help="scenario whose first subject drives the sensor")
    p.add_argument("--registry", default=".tacnet/registry")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--acceleration", type=float, default=1.0,
                   help="virtual seconds per real second")
    p.add_argument("--max-ticks", type=int, default=None)
    p.add_argument("--fifo-path", help="persist flash to this file")
    p.set_defaults(func=_cmd_device)

    _add_gateway_parser(sub)
    return ap


def run(argv, parser) -> int:
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TacnetError, OSError, ConnectionError, TimeoutError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    return run(argv, build_parser())


def gateway_main(argv=None) -> int:
    """`gateway scan|stream|backfill ...` as its own console script."""
    argv = list(sys.argv[1:] if argv is None else argv)
    return run(["gateway"] + argv, build_parser())


if __name__ == "__main__":
    sys.exit(main())
