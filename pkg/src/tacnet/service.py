"""Minimal time-series service: write/query/export over HTTP.

Storage is one append-only log per device under ``data_dir``. Each accepted
batch becomes one entry ``<byte length> <json>\\n`` where the JSON is the list
of accepted points; a torn trailing entry is discarded on load, so a batch is
either fully durable or absent.
"""
from __future__ import annotations

import bisect
import csv
import io
import json
import logging
import os
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.error import HTTPError, URLError
from urllib.parse import parse_qs, quote, unquote, urlencode, urlsplit
from urllib.request import Request, urlopen

from .errors import InvalidInput, ServiceUnavailable

log = logging.getLogger(__name__)

SOURCES = ("realtime", "backfill")
POINT_FIELDS = ("t_ns", "alcohol_raw", "temp_c", "rh_pct", "source")
VALUE_FIELDS = POINT_FIELDS[1:]
CSV_HEADER = ("t_ns", "device", "alcohol_raw", "temp_c", "rh_pct", "source")


@dataclass(frozen=True, order=True)
class SeriesPoint:
    t_ns: int
    source: str
    device_id: str
    alcohol_raw: float
    temp_C: float
    rh_pct: float

    @property
    def key(self):
        return (self.source, self.t_ns)

    def as_json(self, fields=VALUE_FIELDS) -> dict:
        full = {"t_ns": self.t_ns, "alcohol_raw": self.alcohol_raw, "temp_c": self.temp_C,
                "rh_pct": self.rh_pct, "source": self.source}
        return {k: full[k] for k in ("t_ns",) + tuple(f for f in VALUE_FIELDS if f in fields)}


def _number(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidInput(f"{name} must be a number")
    return float(value)


def parse_batch(payload) -> tuple[str, list[SeriesPoint]]:
    """Validate a write payload; unknown or missing fields are rejected."""
    if not isinstance(payload, dict):
        raise InvalidInput("payload must be a JSON object")
    extra = set(payload) - {"device", "points"}
    if extra:
        raise InvalidInput(f"unknown fields: {sorted(extra)}")
    device = payload.get("device")
    if not isinstance(device, str) or not device:
        raise InvalidInput("device must be a non-empty string")
    raw = payload.get("points")
    if not isinstance(raw, list):
        raise InvalidInput("points must be a list")
    points = []
    for i, p in enumerate(raw):
        if not isinstance(p, dict):
            raise InvalidInput(f"points[{i}] must be an object")
        keys = set(p)
        if keys != set(POINT_FIELDS):
            missing, unknown = set(POINT_FIELDS) - keys, keys - set(POINT_FIELDS)
            raise InvalidInput(f"points[{i}]: missing {sorted(missing)}, unknown {sorted(unknown)}")
        t = p["t_ns"]
        if isinstance(t, bool) or not isinstance(t, int):
            raise InvalidInput(f"points[{i}].t_ns must be an integer")
        if p["source"] not in SOURCES:
            raise InvalidInput(f"points[{i}].source must be one of {SOURCES}")
        points.append(SeriesPoint(t, p["source"], device, _number(p["alcohol_raw"], "alcohol_raw"),
                                  _number(p["temp_c"], "temp_c"), _number(p["rh_pct"], "rh_pct")))
    return device, points


class _DeviceSeries:
    def __init__(self, path):
        self.path = path
        self.lock = threading.Lock()
        self.keys: set = set()
        self.points: list[SeriesPoint] = []
        # (sorted points, their t_ns) or None when stale; swapped atomically
        self._snap: tuple | None = ((), [])

    def snapshot(self):
        snap = self._snap
        if snap is None:
            with self.lock:
                if self._snap is None:
                    ordered = tuple(sorted(self.points))
                    self._snap = (ordered, [p.t_ns for p in ordered])
                snap = self._snap
        return snap

    def add(self, pts):
        for p in pts:
            self.keys.add(p.key)
        self.points.extend(pts)
        self._snap = None


def _encode_entry(points: list[SeriesPoint]) -> bytes:
    body = json.dumps([[p.t_ns, p.alcohol_raw, p.temp_C, p.rh_pct, p.source] for p in points],
                      separators=(",", ":")).encode()
    return str(len(body)).encode() + b" " + body + b"\n"


def _read_log(path, device):
    """Parse a device log; returns points and the offset of the last good entry."""
    with open(path, "rb") as fh:
        data = fh.read()
    points, pos = [], 0
    while pos < len(data):
        sp = data.find(b" ", pos)
        try:
            n = int(data[pos:sp])
            body = data[sp + 1:sp + 1 + n]
            if sp < 0 or len(body) != n or data[sp + 1 + n:sp + 2 + n] != b"\n":
                raise ValueError("torn entry")
            rows = json.loads(body)
        except ValueError:
            log.warning("%s: discarding torn tail at byte %d", path, pos)
            break
        points.extend(SeriesPoint(int(t), s, device, a, tc, rh) for t, a, tc, rh, s in rows)
        pos = sp + 2 + n
    return points, pos


class SeriesStore:
    def __init__(self, data_dir, fsync: bool = False):
        self.data_dir = data_dir
        self.fsync = fsync
        os.makedirs(data_dir, exist_ok=True)
        self._series: dict[str, _DeviceSeries] = {}
        self._lock = threading.Lock()
        for fn in sorted(os.listdir(data_dir)):
            if fn.endswith(".log"):
                self._load(fn)

    def _path(self, device):
        return os.path.join(self.data_dir, quote(device, safe="") + ".log")

    def _load(self, fn):
        device = unquote(fn[:-4])
        path = os.path.join(self.data_dir, fn)
        pts, good = _read_log(path, device)
        if good != os.path.getsize(path):
            with open(path, "r+b") as fh:
                fh.truncate(good)
        series = _DeviceSeries(path)
        series.add(pts)
        self._series[device] = series

    def _get(self, device, create=False):
        s = self._series.get(device)
        if s is None and create:
            with self._lock:
                s = self._series.setdefault(device, _DeviceSeries(self._path(device)))
        return s

    def devices(self) -> list[str]:
        return sorted(self._series)

    def write(self, payload) -> dict:
        device, points = parse_batch(payload)
        if not points:
            return {"accepted": 0, "duplicates": 0}
        series = self._get(device, create=True)
        with series.lock:
            fresh, seen = [], set()
            for p in points:
                if p.key in series.keys or p.key in seen:
                    continue
                seen.add(p.key)
                fresh.append(p)
            if fresh:
                with open(series.path, "ab") as fh:
                    fh.write(_encode_entry(fresh))
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
                series.add(fresh)
        return {"accepted": len(fresh), "duplicates": len(points) - len(fresh)}

    def query(self, device: str, from_ns: int | None = None, to_ns: int | None = None,
              source: str | None = None) -> list[SeriesPoint]:
        """Points with from_ns <= t_ns < to_ns, ascending."""
        if from_ns is not None and to_ns is not None and from_ns > to_ns:
            raise InvalidInput("from_ns must not exceed to_ns")
        if source is not None and source not in SOURCES:
            raise InvalidInput(f"source must be one of {SOURCES}")
        series = self._get(device)
        if series is None:
            return []
        snap, times = series.snapshot()
        lo = 0 if from_ns is None else bisect.bisect_left(times, from_ns)
        hi = len(times) if to_ns is None else bisect.bisect_left(times, to_ns)
        pts = snap[lo:hi]
        if source is not None:
            pts = [p for p in pts if p.source == source]
        return list(pts)


def points_to_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        w.writerow([p.t_ns, p.device_id, repr(p.alcohol_raw), repr(p.temp_C), repr(p.rh_pct), p.source])
    return buf.getvalue()


# ---------------------------------------------------------------- HTTP

class ServiceApp:
    """Transport-free request handler; returns (status, content_type, body)."""

    def __init__(self, store: SeriesStore):
        self.store = store

    @staticmethod
    def _error(status, msg):
        return status, "application/json", json.dumps({"error": msg}).encode()

    @staticmethod
    def _int_param(params, name):
        if name not in params:
            return None
        try:
            return int(params[name][-1])
        except ValueError:
            raise InvalidInput(f"{name} must be an integer") from None

    def _selection(self, params):
        device = params.get("device", [None])[-1]
        if not device:
            raise InvalidInput("device parameter is required")
        from_ns, to_ns = self._int_param(params, "from_ns"), self._int_param(params, "to_ns")
        source = params.get("source", [None])[-1]
        return device, self.store.query(device, from_ns, to_ns, source)

    def handle(self, method: str, target: str, body: bytes = b""):
        url = urlsplit(target)
        params = parse_qs(url.query, keep_blank_values=False)
        try:
            if method == "POST" and url.path == "/write":
                try:
                    payload = json.loads(body or b"")
                except ValueError:
                    return self._error(400, "malformed JSON")
                result = self.store.write(payload)
                return 200, "application/json", json.dumps(result).encode()
            if method == "GET" and url.path == "/query":
                fields = VALUE_FIELDS
                if "fields" in params:
                    fields = tuple(f for f in params["fields"][-1].split(",") if f)
                    unknown = set(fields) - set(VALUE_FIELDS) - {"t_ns"}
                    if unknown:
                        raise InvalidInput(f"unknown fields {sorted(unknown)}")
                device, pts = self._selection(params)
                doc = {"device": device, "points": [p.as_json(fields) for p in pts]}
                return 200, "application/json", json.dumps(doc, separators=(",", ":")).encode()
            if method == "GET" and url.path == "/export.csv":
                _, pts = self._selection(params)
                return 200, "text/csv", points_to_csv(pts).encode()
            if method == "GET" and url.path == "/health":
                return 200, "application/json", b'{"status":"ok"}'
        except InvalidInput as exc:
            return self._error(400, str(exc))
        return self._error(404, f"no route for {method} {url.path}")


class _Handler(BaseHTTPRequestHandler):
    app: ServiceApp = None
    protocol_version = "HTTP/1.1"

    def _respond(self, method):
        n = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(n) if n else b""
        status, ctype, out = self.app.handle(method, self.path, body)
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def do_GET(self):
        self._respond("GET")

    def do_POST(self):
        self._respond("POST")

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


class ServiceServer:
    def __init__(self, store: SeriesStore, host: str = "127.0.0.1", port: int = 0):
        handler = type("Handler", (_Handler,), {"app": ServiceApp(store)})
        self.store = store
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self.host, self.port = self.httpd.server_address[:2]
        self._thread = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "ServiceServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def wait(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class HttpServiceClient:
    def __init__(self, base_url: str, timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, method, path, body=None):
        req = Request(self.base_url + path, data=body, method=method,
                      headers={"Content-Type": "application/json"} if body is not None else {})
        try:
            with urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except HTTPError as exc:
            detail = exc.read().decode(errors="replace")
            if exc.code >= 500:
                raise ServiceUnavailable(f"{exc.code}: {detail}") from exc
            raise InvalidInput(f"{exc.code}: {detail}") from exc
        except (URLError, OSError) as exc:
            raise ServiceUnavailable(str(exc)) from exc

    def write(self, payload) -> dict:
        body = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        return json.loads(self._request("POST", "/write", body))

    @staticmethod
    def _params(device, from_ns, to_ns, source, fields=None):
        q = {"device": device}
        if from_ns is not None:
            q["from_ns"] = from_ns
        if to_ns is not None:
            q["to_ns"] = to_ns
        if source is not None:
            q["source"] = source
        if fields is not None:
            q["fields"] = ",".join(fields)
        return urlencode(q)

    def query(self, device, from_ns=None, to_ns=None, fields=None, source=None) -> list[dict]:
        raw = self._request("GET", "/query?" + self._params(device, from_ns, to_ns, source, fields))
        return json.loads(raw)["points"]

    def export_csv(self, device, from_ns=None, to_ns=None, source=None) -> str:
        return self._request("GET", "/export.csv?" + self._params(device, from_ns, to_ns, source)).decode()


class LocalServiceClient(HttpServiceClient):
    """Same surface as `HttpServiceClient`, dispatching straight into a `ServiceApp`."""

    def __init__(self, store: SeriesStore):
        self.app = ServiceApp(store)
        self.base_url = ""

    def _request(self, method, path, body=None):
        status, _, out = self.app.handle(method, path, body or b"")
        if status >= 400:
            raise InvalidInput(f"{status}: {out.decode()}")
        return out
