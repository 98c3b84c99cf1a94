"""Engine: the request-path cache front end plus the background mining loop.

``handle_call`` consults the currently published :class:`DecisionModel` and
either serves from the cache or runs the call through the recorder.
``run_mining_cycle`` drains the recorder, rebuilds the model from the
sliding trace window and swaps it in with a single reference assignment, so
request handlers only ever see a complete model.
"""

from __future__ import annotations

import contextlib
import contextvars
import functools
import logging
import os
import random
import threading
from collections import deque
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Iterator, Mapping, Optional, Sequence

from .cache import CacheConfig, CacheStore, OversizedItem
from .clock import Clock, MonotonicClock, seconds_to_us
from .miner import (
    CriteriaThresholds,
    Decision,
    DecisionModel,
    aggregate,
    build_model,
    undefined_model,
)
from .recorder import HintMode, Recorder, RecorderConfig, TrackingHint
from .trace import CallRecord, MethodId, call_key, serialize_record

log = logging.getLogger(__name__)

ENV_PREFIX = "TRACECACHE_"

_session: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar(
    "tracecache_session", default=None
)


def current_session() -> Optional[str]:
    return _session.get()


@contextlib.contextmanager
def session_scope(token: Optional[str]) -> Iterator[None]:
    """Attribute calls made inside the block to the user session *token*."""
    reset = _session.set(token)
    try:
        yield
    finally:
        _session.reset(reset)


class InsufficientData(RuntimeError):
    """Raised by a mining cycle that ran before the warmup window elapsed.

    The all-Undefined model it published is available as ``.model``.
    """

    def __init__(self, model: DecisionModel) -> None:
        super().__init__("warmup window not yet elapsed; published an all-Undefined model")
        self.model = model


@dataclass
class EngineConfig:
    recorder: RecorderConfig = field(default_factory=RecorderConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    thresholds: CriteriaThresholds = field(default_factory=CriteriaThresholds)
    mining_interval: float = 60.0
    warmup_window: float = 120.0
    # None means two mining intervals
    trace_window: Optional[float] = None
    # sampling multiplier for methods currently judged NotCacheable
    notcacheable_sampling: float = 0.1
    # share of calls to cacheable methods that bypass the cache to observe fresh results
    probe_rate: float = 0.02
    record_hits: bool = True
    hints: Sequence[TrackingHint] = ()
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mining_interval <= 0:
            raise ValueError("mining_interval must be positive")
        if self.warmup_window < 0:
            raise ValueError("warmup_window must be non-negative")
        if self.trace_window is not None and self.trace_window <= 0:
            raise ValueError("trace_window must be positive")
        if not 0.0 < self.notcacheable_sampling <= 1.0:
            raise ValueError("notcacheable_sampling must be in (0, 1]")
        if not 0.0 <= self.probe_rate <= 1.0:
            raise ValueError("probe_rate must be in [0, 1]")

    @property
    def window_us(self) -> int:
        window = self.trace_window if self.trace_window is not None else 2 * self.mining_interval
        return seconds_to_us(window)

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = dict(doc)
        if "recorder" in doc:
            kwargs["recorder"] = RecorderConfig(**doc["recorder"])
        if "cache" in doc:
            kwargs["cache"] = CacheConfig(**doc["cache"])
        if "thresholds" in doc:
            kwargs["thresholds"] = CriteriaThresholds(**doc["thresholds"])
        if "hints" in doc:
            kwargs["hints"] = tuple(
                TrackingHint(MethodId(h["method"]), HintMode(h["mode"])) for h in doc["hints"]
            )
        return cls(**kwargs)


def _read_toml(path: str) -> dict[str, Any]:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path: Optional[str] = None, env: Optional[Mapping[str, str]] = None) -> EngineConfig:
    """Read an engine config from a TOML file, then apply environment overrides.

    ``TRACECACHE_CAPACITY`` (bytes), ``TRACECACHE_TTL`` and
    ``TRACECACHE_MINING_INTERVAL`` (seconds) take precedence over the file.
    """
    config = EngineConfig.from_mapping(_read_toml(path)) if path else EngineConfig()
    env = os.environ if env is None else env
    cache = config.cache
    if ENV_PREFIX + "CAPACITY" in env:
        cache = replace(cache, capacity=int(env[ENV_PREFIX + "CAPACITY"]))
    if ENV_PREFIX + "TTL" in env:
        cache = replace(cache, ttl=float(env[ENV_PREFIX + "TTL"]))
    config = replace(config, cache=cache)
    if ENV_PREFIX + "MINING_INTERVAL" in env:
        config = replace(config, mining_interval=float(env[ENV_PREFIX + "MINING_INTERVAL"]))
    return config


def append_records(path: str, records: Sequence[CallRecord]) -> None:
    if not records:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.writelines(serialize_record(r) + "\n" for r in records)


@dataclass
class MethodCounters:
    hits: int = 0
    misses: int = 0
    probes: int = 0


class Engine:
    def __init__(self, config: Optional[EngineConfig] = None, clock: Optional[Clock] = None) -> None:
        self.config = config or EngineConfig()
        self.clock = clock or MonotonicClock()
        self.recorder = Recorder(self.config.recorder, self.clock)
        self.recorder.set_hints(self.config.hints)
        self.cache = CacheStore(self.config.cache, self.clock)
        self.started_at = self.clock.now_us()
        self.cycles = 0
        self.on_publish: list[Callable[[DecisionModel], None]] = []
        self._model = undefined_model((), self.config.thresholds, self.config.hints, self.started_at)
        self._window: deque[CallRecord] = deque()
        self._seen: set[MethodId] = set()
        self._counters: dict[MethodId, MethodCounters] = {}
        self._counter_lock = threading.Lock()
        self._cycle_lock = threading.Lock()
        self._probe_rng = random.Random(self.config.seed)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # -- model and hints -----------------------------------------------------

    @property
    def model(self) -> DecisionModel:
        return self._model

    def publish(self, model: DecisionModel) -> None:
        self._model = model
        for callback in self.on_publish:
            callback(model)

    def set_hints(self, hints: Sequence[TrackingHint]) -> None:
        self.recorder.set_hints(hints)

    def set_monitoring(self, enabled: bool) -> None:
        self.recorder.enabled = enabled

    def counters(self, method: MethodId) -> MethodCounters:
        with self._counter_lock:
            c = self._counters.get(method)
            return MethodCounters(c.hits, c.misses, c.probes) if c else MethodCounters()

    def _count(self, method: MethodId, attr: str) -> None:
        with self._counter_lock:
            c = self._counters.get(method)
            if c is None:
                c = self._counters[method] = MethodCounters()
            setattr(c, attr, getattr(c, attr) + 1)

    # -- reactive path -------------------------------------------------------

    def _probe(self) -> bool:
        rate = self.config.probe_rate
        if rate <= 0.0:
            return False
        with self._counter_lock:
            return self._probe_rng.random() < rate

    def handle_call(
        self,
        method: MethodId,
        params: Sequence[Any],
        session: Optional[str],
        thunk: Callable[[], Any],
    ) -> Any:
        mode = self.recorder.hint_for(method)
        decision = self._model.decision(method)
        if mode is HintMode.ALWAYS_CACHE:
            cacheable = True
        elif mode in (HintMode.NEVER_CACHE, HintMode.NEVER_TRACK):
            cacheable = False
        else:
            cacheable = decision is Decision.CACHEABLE

        if not cacheable:
            scale = self.config.notcacheable_sampling if decision is Decision.NOT_CACHEABLE else 1.0
            return self.recorder.execute(method, params, session, thunk, rate_scale=scale).value

        try:
            canonical = self.recorder.canonical_params(method, params)
            if canonical is None:
                return self.recorder.execute(method, params, session, thunk).value
            key = call_key(method, canonical)
            probe = self._probe()
            entry = None if probe else self.cache.lookup(key)
        except Exception:
            log.exception("cache lookup failed for %s; calling through", method)
            return self.recorder.execute(method, params, session, thunk).value

        if entry is not None:
            self._count(method, "hits")
            if self.config.record_hits and self.recorder.should_record(method):
                self.recorder.enqueue(
                    CallRecord(method, canonical, entry.result, entry.cost_us, session, self.clock.now_us())
                )
            return entry.value

        self._count(method, "probes" if probe else "misses")
        ex = self.recorder.execute(method, params, session, thunk, canonical=canonical, need_result=True)
        if ex.result is not None and not probe:
            try:
                self.cache.admit(key, ex.result, value=ex.value, cost_us=ex.cost_us)
            except OversizedItem:
                pass
            except Exception:
                log.exception("cache admission failed for %s", method)
        return ex.value

    def cached(self, func: Optional[Callable] = None, *, method: Optional[MethodId] = None):
        """Decorator routing calls of a function through :meth:`handle_call`.

        Keyword arguments are passed as one trailing mapping parameter; the
        session comes from the enclosing :func:`session_scope`.
        """

        def wrap(f: Callable) -> Callable:
            mid = method or MethodId.of(f)

            @functools.wraps(f)
            def inner(*args: Any, **kwargs: Any) -> Any:
                params = list(args) + ([kwargs] if kwargs else [])
                return self.handle_call(mid, params, current_session(), lambda: f(*args, **kwargs))

            inner.method_id = mid  # type: ignore[attr-defined]
            return inner

        return wrap(func) if func is not None else wrap

    # -- proactive path ------------------------------------------------------

    def run_mining_cycle(self, now: Optional[int] = None) -> DecisionModel:
        with self._cycle_lock:
            now = self.clock.now_us() if now is None else now
            records = self.recorder.drain()
            if self.config.recorder.sink:
                append_records(self.config.recorder.sink, records)
            horizon = now - self.config.window_us
            self._window.extend(records)
            self._window = deque(r for r in self._window if r.at_us >= horizon)
            self._seen.update(r.method for r in records)
            self.cycles += 1

            hints = [TrackingHint(m, mode) for m, mode in self.recorder.hints.items()]
            thresholds = self.config.thresholds
            if now - self.started_at < seconds_to_us(self.config.warmup_window):
                model = undefined_model(self._seen, thresholds, hints, built_at=now)
                self.publish(model)
                raise InsufficientData(model)

            model = build_model(aggregate(self._window), thresholds, hints, built_at=now)
            self.publish(model)
            self.cache.sweep(now)
            return model

    def window(self) -> list[CallRecord]:
        return list(self._window)

    def _loop(self) -> None:
        interval = self.config.mining_interval
        while not self._stop.wait(interval):
            try:
                self.run_mining_cycle()
            except InsufficientData:
                log.debug("mining cycle before warmup; model left Undefined")
            except Exception:
                log.exception("mining cycle failed; keeping previous model")

    def start(self) -> "Engine":
        if self._thread is None:
            self._stop.clear()
            self._thread = threading.Thread(target=self._loop, name="tracecache-miner", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None

    def __enter__(self) -> "Engine":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()
