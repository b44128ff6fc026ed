"""Injectable clocks.

Everything that needs time takes one of these instead of calling the
OS directly, so scripted sessions and the coordination simulator run
fully deterministically.
"""

from __future__ import annotations

import threading
import time
from datetime import datetime, timedelta, timezone
from typing import Protocol


class Clock(Protocol):
    def now_ns(self) -> int:
        """Monotonic nanoseconds; the timestamp domain of media frames."""
        ...

    def now_utc(self) -> datetime:
        """Wall-clock UTC; the timestamp domain of session events."""
        ...

    def sleep_until(self, t_ns: int) -> None:
        ...


class SystemClock:
    """Real clock backed by time.monotonic_ns / system UTC."""

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def now_utc(self) -> datetime:
        return datetime.now(timezone.utc)

    def sleep_until(self, t_ns: int) -> None:
        delta = (t_ns - self.now_ns()) / 1e9
        if delta > 0:
            time.sleep(delta)


# Simulated UTC anchors at a fixed instant so scripted runs are reproducible.
_SIM_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)


class SimulatedClock:
    """Manually advanced clock; sleep_until() jumps straight to the target."""

    def __init__(self, start_ns: int = 0):
        self._now_ns = start_ns
        self._lock = threading.Lock()

    def now_ns(self) -> int:
        with self._lock:
            return self._now_ns

    def now_utc(self) -> datetime:
        return _SIM_EPOCH + timedelta(microseconds=self.now_ns() / 1000.0)

    def sleep_until(self, t_ns: int) -> None:
        self.advance_to(t_ns)

    def advance_to(self, t_ns: int) -> None:
        with self._lock:
            if t_ns > self._now_ns:
                self._now_ns = t_ns

    def advance(self, delta_ns: int) -> None:
        with self._lock:
            self._now_ns += delta_ns
