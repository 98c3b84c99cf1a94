"""Injectable clocks. All times are integer microseconds."""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now_us(self) -> int: ...

    def spend(self, duration_us: int) -> None:
        """Let *duration_us* elapse (sleep, or advance a simulated clock)."""


class MonotonicClock:
    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def spend(self, duration_us: int) -> None:
        if duration_us > 0:
            time.sleep(duration_us / 1e6)


class ManualClock:
    """A simulated clock that only moves when told to."""

    def __init__(self, start_us: int = 0) -> None:
        self._now = int(start_us)
        self._lock = threading.Lock()

    def now_us(self) -> int:
        return self._now

    def set(self, now_us: int) -> None:
        with self._lock:
            self._now = int(now_us)

    def advance(self, duration_us: int) -> int:
        if duration_us < 0:
            raise ValueError("cannot move a clock backwards")
        with self._lock:
            self._now += int(duration_us)
            return self._now

    spend = advance


def seconds_to_us(seconds: float) -> int:
    return int(round(seconds * 1_000_000))
