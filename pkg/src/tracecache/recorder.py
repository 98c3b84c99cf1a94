"""Call gateway: runs wrapped invocations, measures them and buffers traces.

Applications route expensive calls through :meth:`Recorder.invoke_tracked`.
Recording never blocks the caller beyond canonicalizing the inputs and the
result; records sit in a bounded in-memory buffer until the controller
drains them to the trace sink on its own thread.
"""

from __future__ import annotations

import enum
import logging
import random
import threading
from collections import deque
from dataclasses import dataclass
from types import MappingProxyType
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from .clock import Clock, MonotonicClock
from .trace import CallRecord, CanonicalValue, MethodId, UnsupportedValue, canonicalize

log = logging.getLogger(__name__)


class HintMode(str, enum.Enum):
    ALWAYS_TRACK = "AlwaysTrack"
    NEVER_TRACK = "NeverTrack"
    NEVER_CACHE = "NeverCache"
    ALWAYS_CACHE = "AlwaysCache"


@dataclass(frozen=True)
class TrackingHint:
    method: MethodId
    mode: HintMode

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", HintMode(self.mode))


class DuplicateHint(ValueError):
    pass


@dataclass
class RecorderConfig:
    buffer_capacity: int = 100_000
    sampling_rate: float = 1.0
    sink: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must be in (0, 1]")


@dataclass(frozen=True)
class Execution:
    """Outcome of one gateway invocation, for callers that also cache."""

    value: Any
    result: Optional[CanonicalValue]
    cost_us: int
    recorded: bool


def index_hints(hints: Iterable[TrackingHint]) -> dict[MethodId, HintMode]:
    table: dict[MethodId, HintMode] = {}
    for hint in hints:
        if hint.method in table:
            raise DuplicateHint(f"more than one hint for {hint.method}")
        table[hint.method] = hint.mode
    return table


class Recorder:
    def __init__(self, config: Optional[RecorderConfig] = None, clock: Optional[Clock] = None) -> None:
        self.config = config or RecorderConfig()
        self.clock = clock or MonotonicClock()
        self.enabled = True
        self.dropped = 0
        self._buffer: deque[CallRecord] = deque()
        self._lock = threading.Lock()
        self._rng = random.Random(self.config.seed)
        self._hints: Mapping[MethodId, HintMode] = MappingProxyType({})
        self._warned: set[MethodId] = set()

    # -- hints ---------------------------------------------------------------

    @property
    def hints(self) -> Mapping[MethodId, HintMode]:
        return self._hints

    def set_hints(self, hints: Sequence[TrackingHint]) -> None:
        # build fully, then swap the reference: readers never see a partial table
        self._hints = MappingProxyType(index_hints(hints))

    def hint_for(self, method: MethodId) -> Optional[HintMode]:
        return self._hints.get(method)

    def is_tracked(self, method: MethodId) -> bool:
        return self._hints.get(method) is not HintMode.NEVER_TRACK

    # -- buffer --------------------------------------------------------------

    def enqueue(self, rec: CallRecord) -> bool:
        with self._lock:
            if len(self._buffer) >= self.config.buffer_capacity:
                self.dropped += 1
                return False
            self._buffer.append(rec)
            return True

    def drain(self) -> list[CallRecord]:
        with self._lock:
            out = list(self._buffer)
            self._buffer.clear()
        return out

    def __len__(self) -> int:
        return len(self._buffer)

    # -- invocation ----------------------------------------------------------

    def _coin(self, rate: float) -> bool:
        if rate >= 1.0:
            return True
        with self._lock:
            return self._rng.random() < rate

    def should_record(self, method: MethodId, rate_scale: float = 1.0) -> bool:
        if not self.enabled:
            return False
        mode = self._hints.get(method)
        if mode is HintMode.NEVER_TRACK:
            return False
        if mode is HintMode.ALWAYS_TRACK:
            return True
        return self._coin(self.config.sampling_rate * rate_scale)

    def warn_unsupported(self, method: MethodId, exc: Exception) -> None:
        if method not in self._warned:
            self._warned.add(method)
            log.warning("not tracking %s: %s", method, exc)

    def canonical_params(self, method: MethodId, params: Sequence[Any]) -> Optional[tuple]:
        """Canonical parameters, or None if they fall outside the value universe."""
        try:
            return tuple(canonicalize(p) for p in params)
        except UnsupportedValue as exc:
            self.warn_unsupported(method, exc)
            return None

    def execute(
        self,
        method: MethodId,
        params: Sequence[Any],
        session: Optional[str],
        thunk: Callable[[], Any],
        *,
        rate_scale: float = 1.0,
        canonical: Optional[tuple] = None,
        need_result: bool = False,
    ) -> Execution:
        record = self.should_record(method, rate_scale)
        if record and canonical is None:
            canonical = self.canonical_params(method, params)
            record = canonical is not None

        start = self.clock.now_us()
        value = thunk()  # errors propagate; nothing has been buffered yet
        end = self.clock.now_us()
        cost = max(0, end - start)

        result: Optional[CanonicalValue] = None
        if record or need_result:
            try:
                result = canonicalize(value)
            except UnsupportedValue as exc:
                self.warn_unsupported(method, exc)
                record = False
        if record:
            assert canonical is not None and result is not None
            record = self.enqueue(CallRecord(method, canonical, result, cost, session, end))
        return Execution(value, result, cost, record)

    def invoke_tracked(
        self,
        method: MethodId,
        params: Sequence[Any],
        session: Optional[str],
        thunk: Callable[[], Any],
    ) -> Any:
        return self.execute(method, params, session, thunk).value
