"""Byte-stream transports between the gateway and emulated devices.

Two flavours share one gateway-facing surface (``send``, ``recv``, ``close``,
``connected``): an in-process link used by the virtual-clock harness and a
TCP socket used when the emulator runs as its own process. Device discovery
goes through a registry (in-process dict or a directory of JSON files).
"""
from __future__ import annotations

import json
import logging
import os
import select
import socket
import threading
from dataclasses import dataclass
from typing import Callable, Iterator

from ..clock import VirtualClock
from ..physio import Observation
from .emulator import DeviceEmulator

log = logging.getLogger(__name__)


class InProcessLink:
    """Direct connection to an emulator living in the same process.

    `frames_per_recv` throttles how many queued frames one `recv` call moves,
    which lets tests interleave ticks with a flash dump in flight.
    """

    def __init__(self, device: DeviceEmulator, frames_per_recv: int | None = None):
        self.device = device
        self.frames_per_recv = frames_per_recv
        self.connected = True

    def send(self, data: bytes) -> None:
        if not self.connected:
            raise ConnectionError("link closed")
        self.device.receive(data)

    def recv(self, timeout: float = 0.0) -> bytes:
        if not self.connected:
            return b""
        return self.device.drain(self.frames_per_recv)

    def close(self) -> None:
        if self.connected:
            self.connected = False
            self.device.disconnect()


class SocketTransport:
    def __init__(self, host: str, port: int, timeout: float = 2.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.connected = True

    def send(self, data: bytes) -> None:
        if not self.connected:
            raise ConnectionError("socket closed")
        try:
            self.sock.sendall(data)
        except OSError as exc:
            self.connected = False
            raise ConnectionError(str(exc)) from exc

    def recv(self, timeout: float = 0.0) -> bytes:
        if not self.connected:
            return b""
        ready, _, _ = select.select([self.sock], [], [], timeout)
        if not ready:
            return b""
        try:
            data = self.sock.recv(65536)
        except OSError:
            data = b""
        if not data:
            self.connected = False
        return data

    def close(self) -> None:
        self.connected = False
        try:
            self.sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------- registries

@dataclass(frozen=True)
class RegistryEntry:
    name: str
    address: str
    connect: Callable[[], object]


class InProcessRegistry:
    def __init__(self):
        self._devices: dict[str, DeviceEmulator] = {}

    def add(self, device: DeviceEmulator) -> None:
        self._devices[device.config.name] = device

    def entries(self) -> list[RegistryEntry]:
        return [RegistryEntry(name, f"inproc:{name}", lambda d=dev: InProcessLink(d))
                for name, dev in sorted(self._devices.items())]


class DirectoryRegistry:
    """Advertisement files ``<name>.json`` holding ``{"name", "host", "port"}``."""

    def __init__(self, path):
        self.path = path

    def register(self, name: str, host: str, port: int) -> None:
        os.makedirs(self.path, exist_ok=True)
        tmp = os.path.join(self.path, f".{name}.json.tmp")
        with open(tmp, "w") as fh:
            json.dump({"name": name, "host": host, "port": port}, fh)
        os.replace(tmp, os.path.join(self.path, f"{name}.json"))

    def unregister(self, name: str) -> None:
        try:
            os.remove(os.path.join(self.path, f"{name}.json"))
        except FileNotFoundError:
            pass

    def entries(self) -> list[RegistryEntry]:
        if not os.path.isdir(self.path):
            raise ConnectionError(f"registry {self.path} not found")
        out = []
        for fn in sorted(os.listdir(self.path)):
            if not fn.endswith(".json") or fn.startswith("."):
                continue
            try:
                with open(os.path.join(self.path, fn)) as fh:
                    ad = json.load(fh)
                host, port = ad["host"], int(ad["port"])
            except (OSError, ValueError, KeyError) as exc:
                log.warning("skipping advertisement %s: %s", fn, exc)
                continue
            out.append(RegistryEntry(ad["name"], f"{host}:{port}",
                                     lambda h=host, p=port: SocketTransport(h, p)))
        return out


# ---------------------------------------------------------------- TCP server

class DeviceServer:
    """Runs an emulator on its own clock and exposes it over TCP.

    One gateway connection is served at a time; a new connection replaces the
    previous one. Observations come from any iterator of `Observation`; when it
    is exhausted the last observation is held.
    """

    def __init__(self, device: DeviceEmulator, observations: Iterator[Observation],
                 clock: VirtualClock, host: str = "127.0.0.1", port: int = 0,
                 registry: DirectoryRegistry | None = None, max_ticks: int | None = None):
        self.device = device
        self.observations = observations
        self.clock = clock
        self.registry = registry
        self.max_ticks = max_ticks
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._conn = None
        self._running = threading.Event()
        self._threads: list[threading.Thread] = []
        self._last_obs = None

    def start(self) -> "DeviceServer":
        self._running.set()
        for target in (self._accept_loop, self._tick_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        if self.registry is not None:
            self.registry.register(self.device.config.name, self.host, self.port)
        return self

    def stop(self) -> None:
        self._running.clear()
        if self.registry is not None:
            self.registry.unregister(self.device.config.name)
        try:
            self._listener.close()
        except OSError:
            pass
        self._drop_conn()
        for t in self._threads:
            t.join(timeout=2.0)

    def wait(self, timeout: float | None = None) -> None:
        self._threads[1].join(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _drop_conn(self):
        with self._lock:
            conn, self._conn = self._conn, None
            if conn is not None:
                self.device.disconnect()
        if conn is not None:
            try:
                conn.close()
            except OSError:
                pass

    def _flush(self):
        with self._lock:
            conn = self._conn
            data = self.device.drain() if conn is not None else b""
        if data and conn is not None:
            with self._send_lock:
                try:
                    conn.sendall(data)
                except OSError:
                    self._drop_conn()

    def _accept_loop(self):
        self._listener.settimeout(0.1)
        while self._running.is_set():
            try:
                conn, _ = self._listener.accept()
            except (socket.timeout, OSError):
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._drop_conn()
            with self._lock:
                self._conn = conn
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn):
        while self._running.is_set():
            try:
                ready, _, _ = select.select([conn], [], [], 0.1)
                if not ready:
                    continue
                data = conn.recv(4096)
            except (OSError, ValueError):
                data = b""
            if not data:
                if self._conn is conn:
                    self._drop_conn()
                return
            with self._lock:
                if self._conn is not conn:
                    return
                self.device.receive(data)
            self._flush()

    def _tick_loop(self):
        n = 0
        while self._running.is_set() and (self.max_ticks is None or n < self.max_ticks):
            obs = next(self.observations, None)
            if obs is None:
                obs = self._last_obs
            self._last_obs = obs
            if obs is not None:
                with self._lock:
                    self.device.tick(obs)
            self._flush()
            self.clock.advance(1)
            n += 1
