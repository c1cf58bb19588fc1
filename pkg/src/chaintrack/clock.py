"""Shared clocks for the engine and the ledger.

The virtual clock advances a fixed step per engine event so that hashes,
block timestamps and time-window checks are reproducible.
"""

from __future__ import annotations

import threading
import time

DEFAULT_EPOCH_MS = 1_680_000_000_000
DEFAULT_STEP_MS = 1000


class VirtualClock:
    mode = "virtual"

    def __init__(self, start_ms: int = DEFAULT_EPOCH_MS, step_ms: int = DEFAULT_STEP_MS) -> None:
        if step_ms <= 0:
            raise ValueError("step_ms must be positive")
        self._now = start_ms
        self.step_ms = step_ms
        self._lock = threading.Lock()

    def now(self) -> int:
        return self._now

    def tick(self) -> int:
        with self._lock:
            self._now += self.step_ms
            return self._now

    def advance_to(self, ms: int) -> None:
        with self._lock:
            self._now = max(self._now, ms)


class WallClock:
    mode = "wall"

    def __init__(self, step_ms: int = DEFAULT_STEP_MS) -> None:
        self.step_ms = step_ms
        self._last = 0
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            self._last = max(self._last, int(time.time() * 1000))
            return self._last

    def tick(self) -> int:
        return self.now()

    def advance_to(self, ms: int) -> None:
        with self._lock:
            self._last = max(self._last, ms)


def make_clock(mode: str = "virtual", **kwargs) -> VirtualClock | WallClock:
    if mode == "virtual":
        return VirtualClock(**kwargs)
    if mode == "wall":
        return WallClock(**kwargs)
    raise ValueError(f"unknown clock mode {mode!r}")
