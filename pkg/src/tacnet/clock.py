"""Virtual clock shared by every component of a run."""
from __future__ import annotations

import threading
import time

# 2020-01-01T00:00:00Z
DEFAULT_EPOCH_NS = 1_577_836_800 * 10**9


class VirtualClock:
    """Integer-second simulation time mapped onto a fixed wall-clock epoch.

    With ``acceleration=None`` time advances as fast as the caller steps it.
    A finite acceleration paces `advance` against the real clock, so
    ``acceleration=60`` plays one virtual minute per real second.
    """

    def __init__(self, start_unix_ns: int = DEFAULT_EPOCH_NS, acceleration: float | None = None):
        if acceleration is not None and acceleration <= 0:
            raise ValueError("acceleration must be positive")
        self.start_unix_ns = int(start_unix_ns)
        self.acceleration = acceleration
        self._t_s = 0
        self._lock = threading.Lock()
        self._real_anchor = time.monotonic()

    @property
    def now_s(self) -> int:
        return self._t_s

    def now_ns(self) -> int:
        return self.start_unix_ns + self._t_s * 10**9

    def advance(self, dt_s: int = 1) -> int:
        if dt_s < 0:
            raise ValueError("dt_s must be non-negative")
        with self._lock:
            self._t_s += int(dt_s)
            t = self._t_s
        if self.acceleration is not None:
            due = self._real_anchor + t / self.acceleration
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        return t

    def session_seconds(self, t_ns: int) -> float:
        return (t_ns - self.start_unix_ns) / 1e9
