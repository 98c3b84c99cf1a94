"""Synthetic web application and closed-loop workload driver.

Emulated users start on the home page and keep following links until they
have issued ``requests_per_user`` requests. Each page calls a fixed list of
synthetic methods whose behaviour is declared by a profile, so the verdict a
method *should* get is known in advance (:func:`plant_ground_truth`).

Three configurations are compared: ``NO`` calls methods directly, ``AP`` puts
the adaptive engine in front of them, ``DEV`` caches a hand-picked method
list with no mining at all.

With ``virtual_time`` (the default) method costs advance a simulated clock
instead of sleeping. Users are interleaved request by request in virtual-time
order, so a run is a deterministic function of (app, workload, config, seed)
and throughput is reported in virtual requests per second.
"""

from __future__ import annotations

import bisect
import enum
import functools
import heapq
import itertools
import json
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Optional, Sequence

from .clock import Clock, ManualClock, MonotonicClock, seconds_to_us
from .controller import Engine, EngineConfig, InsufficientData
from .miner import Decision, DecisionModel
from .recorder import HintMode, TrackingHint
from .trace import MethodId

SCENARIO_SCHEMA = "tracecache.scenario/1"
SIMULATION_SCHEMA = "tracecache.simulation/1"


class Profile(str, enum.Enum):
    STATIC = "Static"
    LOW_CHANGE = "LowChange"
    VOLATILE = "Volatile"
    EXPENSIVE = "Expensive"
    USER_SPECIFIC = "UserSpecific"


class Configuration(str, enum.Enum):
    NO = "NO"
    AP = "AP"
    DEV = "DEV"


class InvalidScenario(ValueError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    name: str
    profile: Profile
    param_space: int = 10
    cost_us: int = 100
    # LowChange only: per-call probability that the value behind a key changes
    change_rate: float = 0.0
    result_size: int = 32
    # 0 draws params uniformly; s > 0 draws param i with weight 1 / (i + 1) ** s
    param_skew: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "profile", Profile(self.profile))
        if self.param_space < 1:
            raise InvalidScenario(f"{self.name}: param_space must be >= 1")
        if self.cost_us < 0:
            raise InvalidScenario(f"{self.name}: cost_us must be >= 0")
        if not 0.0 <= self.change_rate <= 1.0:
            raise InvalidScenario(f"{self.name}: change_rate must be in [0, 1]")


@dataclass(frozen=True)
class Link:
    target: str
    weight: float = 1.0


@dataclass(frozen=True)
class Page:
    name: str
    calls: tuple = ()
    write: bool = False
    links: tuple = ()
    base_cost_us: int = 200


@dataclass
class SyntheticApp:
    methods: dict[str, MethodSpec]
    pages: dict[str, Page]
    home: str
    namespace: str = "app"

    def __post_init__(self) -> None:
        if self.home not in self.pages:
            raise InvalidScenario(f"home page {self.home!r} is not defined")
        for page in self.pages.values():
            for call in page.calls:
                if call not in self.methods:
                    raise InvalidScenario(f"page {page.name!r} calls unknown method {call!r}")
            for link in page.links:
                if link.target not in self.pages:
                    raise InvalidScenario(f"page {page.name!r} links to unknown page {link.target!r}")
                if link.weight <= 0:
                    raise InvalidScenario(f"page {page.name!r}: link weights must be positive")

    def method_id(self, name: str) -> MethodId:
        return MethodId(f"{self.namespace}.{name}/1")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SyntheticApp":
        try:
            methods = {m["name"]: MethodSpec(**m) for m in doc["methods"]}
            pages = {}
            for p in doc["pages"]:
                links = tuple(Link(**link) for link in p.get("links", ()))
                pages[p["name"]] = Page(
                    p["name"], tuple(p.get("calls", ())), bool(p.get("write", False)),
                    links, int(p.get("base_cost_us", 200)),
                )
            return cls(methods, pages, doc["home"], doc.get("namespace", "app"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenario(f"bad app definition: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "namespace": self.namespace,
            "home": self.home,
            "methods": [
                {**asdict(m), "profile": m.profile.value} for m in self.methods.values()
            ],
            "pages": [
                {
                    "name": p.name,
                    "calls": list(p.calls),
                    "write": p.write,
                    "links": [asdict(link) for link in p.links],
                    "base_cost_us": p.base_cost_us,
                }
                for p in self.pages.values()
            ],
        }


@dataclass(frozen=True)
class WorkloadSpec:
    users: tuple = (1, 5, 10, 25, 50)
    requests_per_user: int = 500
    read_fraction: float = 0.8
    seed: int = 0
    repetitions: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "users", tuple(int(u) for u in self.users))
        if not 0.0 <= self.read_fraction <= 1.0:
            raise InvalidScenario("read_fraction must be in [0, 1]")
        if self.requests_per_user < 1 or self.repetitions < 1:
            raise InvalidScenario("requests_per_user and repetitions must be >= 1")
        if not self.users or min(self.users) < 1:
            raise InvalidScenario("users must be a non-empty list of positive counts")


def plant_ground_truth(app: SyntheticApp) -> dict[MethodId, Decision]:
    """Verdicts the profiled methods should receive given enough traces.

    LowChange methods are left out: whether a slowly changing method clears
    the changeability bar depends on the rest of the population. UserSpecific
    methods only look non-static when at least two sessions share params.
    """
    truth = {}
    for spec in app.methods.values():
        if spec.profile in (Profile.STATIC, Profile.EXPENSIVE):
            truth[app.method_id(spec.name)] = Decision.CACHEABLE
        elif spec.profile in (Profile.VOLATILE, Profile.USER_SPECIFIC):
            truth[app.method_id(spec.name)] = Decision.NOT_CACHEABLE
    return truth


# -- method behaviour --------------------------------------------------------

class _AppState:
    """Mutable data behind the synthetic methods, shared by all users of a run."""

    def __init__(self, app: SyntheticApp, clock: Clock, seed: str) -> None:
        self.app = app
        self.clock = clock
        self.rng = random.Random(seed)
        self.versions: dict[tuple[str, int], int] = {}
        self.user_versions: dict[str, int] = {}
        self.fresh = itertools.count()
        self.lock = threading.Lock()

    def _payload(self, spec: MethodSpec, *parts: Any) -> dict[str, Any]:
        tag = ":".join(str(p) for p in parts)
        body = (tag * (spec.result_size // max(len(tag), 1) + 1))[: spec.result_size]
        return {"key": tag, "body": body}

    def compute(self, spec: MethodSpec, param: int, session: str) -> dict[str, Any]:
        self.clock.spend(spec.cost_us)
        profile = spec.profile
        if profile in (Profile.STATIC, Profile.EXPENSIVE):
            return self._payload(spec, spec.name, param)
        with self.lock:
            if profile is Profile.LOW_CHANGE:
                key = (spec.name, param)
                if self.rng.random() < spec.change_rate:
                    self.versions[key] = self.versions.get(key, 0) + 1
                return self._payload(spec, spec.name, param, self.versions.get(key, 0))
            if profile is Profile.VOLATILE:
                return self._payload(spec, spec.name, param, next(self.fresh))
            version = self.user_versions.get(session, 0)
        return self._payload(spec, spec.name, param, session, version)

    def write(self, session: str) -> None:
        with self.lock:
            self.user_versions[session] = self.user_versions.get(session, 0) + 1


class _User:
    def __init__(self, app: SyntheticApp, spec: WorkloadSpec, rng: random.Random, session: str) -> None:
        self.app = app
        self.spec = spec
        self.rng = rng
        self.session = session
        self.page = app.home
        self.remaining = spec.requests_per_user
        self.local_us = 0
        self.reads = 0
        self.first = True

    def choose_page(self) -> str:
        if self.first:
            self.first = False
            return self.app.home
        pages = self.app.pages
        want_write = self.rng.random() >= self.spec.read_fraction
        links = [l for l in pages[self.page].links if pages[l.target].write == want_write]
        if not links:
            # no link of the wanted kind from here: jump to any page of that kind
            links = [Link(p.name) for p in pages.values() if p.write == want_write]
        if not links:
            links = list(pages[self.page].links) or [Link(self.app.home)]
        total = list(itertools.accumulate(l.weight for l in links))
        pick = self.rng.random() * total[-1]
        return links[min(bisect.bisect_right(total, pick), len(links) - 1)].target

    def choose_param(self, method: MethodSpec) -> int:
        if method.param_skew <= 0:
            return self.rng.randrange(method.param_space)
        weights = [1.0 / (i + 1) ** method.param_skew for i in range(method.param_space)]
        return self.rng.choices(range(method.param_space), weights)[0]


# -- reports -----------------------------------------------------------------

@dataclass
class Sample:
    throughput: float
    hit_ratio: float
    total_hits: int
    requests: int
    duration_s: float
    read_fraction: float
    methods: dict[str, dict[str, int]] = field(default_factory=dict)
    first_model: Optional[dict[str, str]] = None
    final_model: Optional[dict[str, str]] = None
    first_model_calls: Optional[dict[str, int]] = None

    def post_warmup_hit_ratio(self, name: str) -> float:
        m = self.methods[name]
        lookups = m["post_warmup_hits"] + m["post_warmup_misses"]
        return m["post_warmup_hits"] / lookups if lookups else 0.0


@dataclass
class Cell:
    configuration: str
    users: int
    throughput: float
    hit_ratio: float
    total_hits: float
    samples: list[Sample]


@dataclass
class SimulationReport:
    cells: list[Cell]
    seed: int = 0

    def cell(self, configuration: str, users: int) -> Cell:
        for c in self.cells:
            if c.configuration == configuration and c.users == users:
                return c
        raise KeyError((configuration, users))

    def to_dict(self) -> dict[str, Any]:
        return {"schema": SIMULATION_SCHEMA, "seed": self.seed, "cells": [asdict(c) for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


# -- driver ------------------------------------------------------------------

def _model_summary(app: SyntheticApp, model: DecisionModel) -> tuple[dict[str, str], dict[str, int]]:
    decisions, calls = {}, {}
    for name in app.methods:
        verdict = model.verdicts.get(app.method_id(name))
        decisions[name] = (verdict.decision if verdict else Decision.UNDEFINED).value
        calls[name] = verdict.call_count if verdict else 0
    return decisions, calls


class _Run:
    """One repetition of one (configuration, user count) cell."""

    def __init__(
        self,
        app: SyntheticApp,
        spec: WorkloadSpec,
        config: Configuration,
        users: int,
        rep: int,
        engine_config: EngineConfig,
        dev_methods: Sequence[str],
        clock: Clock,
    ) -> None:
        self.app = app
        self.spec = spec
        self.config = config
        self.clock = clock
        base = f"{spec.seed}:{users}:{rep}"
        self.state = _AppState(app, clock, f"{base}:app")
        self.users = [
            _User(app, spec, random.Random(f"{base}:user:{u}"), f"r{rep}-u{u}") for u in range(users)
        ]
        self.engine: Optional[Engine] = None
        if config is Configuration.AP:
            self.engine = Engine(engine_config, clock)
        elif config is Configuration.DEV:
            hints = [TrackingHint(app.method_id(n), HintMode.ALWAYS_CACHE) for n in dev_methods]
            self.engine = Engine(
                EngineConfig(cache=engine_config.cache, hints=hints, probe_rate=0.0), clock
            )
            self.engine.set_monitoring(False)
        self.warmup_us = seconds_to_us(engine_config.warmup_window)
        self.first_model: Optional[DecisionModel] = None
        self.snapshot: Optional[dict[str, tuple[int, int]]] = None
        self.lock = threading.Lock()
        if self.engine is not None and config is Configuration.AP:
            self.engine.on_publish.append(self._published)

    def _published(self, model: DecisionModel) -> None:
        if self.first_model is None and model.built_at - self.engine.started_at >= self.warmup_us:
            self.first_model = model

    def request(self, user: _User) -> None:
        page = self.app.pages[user.choose_page()]
        user.page = page.name
        if not page.write:
            user.reads += 1
        self.clock.spend(page.base_cost_us)
        for name in page.calls:
            spec = self.app.methods[name]
            param = user.choose_param(spec)
            thunk = functools.partial(self.state.compute, spec, param, user.session)
            if self.engine is None:
                thunk()
            else:
                self.engine.handle_call(self.app.method_id(name), [param], user.session, thunk)
        if page.write:
            self.state.write(user.session)
        user.remaining -= 1

    def take_snapshot(self) -> None:
        with self.lock:
            if self.snapshot is None:
                self.snapshot = self._counts()

    def _counts(self) -> dict[str, tuple[int, int]]:
        out = {}
        for name in self.app.methods:
            if self.engine is None:
                out[name] = (0, 0)
            else:
                c = self.engine.counters(self.app.method_id(name))
                out[name] = (c.hits, c.misses)
        return out

    def sample(self, duration_us: int) -> Sample:
        requests = self.spec.requests_per_user * len(self.users)
        reads = sum(u.reads for u in self.users)
        end = self._counts()
        start = self.snapshot or end
        methods = {
            name: {
                "hits": end[name][0],
                "misses": end[name][1],
                "post_warmup_hits": end[name][0] - start[name][0],
                "post_warmup_misses": end[name][1] - start[name][1],
            }
            for name in self.app.methods
        }
        hits = misses = 0
        if self.engine is not None:
            hits, misses = self.engine.cache.stats.hits, self.engine.cache.stats.misses
        duration_s = duration_us / 1e6
        s = Sample(
            throughput=requests / duration_s if duration_s > 0 else 0.0,
            hit_ratio=hits / (hits + misses) if hits + misses else 0.0,
            total_hits=hits,
            requests=requests,
            duration_s=duration_s,
            read_fraction=reads / requests,
            methods=methods,
        )
        if self.config is Configuration.AP and self.engine is not None:
            if self.first_model is not None:
                s.first_model, s.first_model_calls = _model_summary(self.app, self.first_model)
            s.final_model, _ = _model_summary(self.app, self.engine.model)
        return s


def _mine(engine: Engine, now: int) -> None:
    try:
        engine.run_mining_cycle(now)
    except InsufficientData:
        pass


def _run_virtual(run: _Run, engine_config: EngineConfig) -> Sample:
    clock = run.clock
    assert isinstance(clock, ManualClock)
    interval = seconds_to_us(engine_config.mining_interval)
    mining = run.config is Configuration.AP
    next_cycle = interval
    heap = [(0, i) for i in range(len(run.users))]
    heapq.heapify(heap)
    makespan = 0
    while heap:
        t, i = heapq.heappop(heap)
        while mining and t >= next_cycle:
            clock.set(next_cycle)
            _mine(run.engine, next_cycle)
            next_cycle += interval
        if t >= run.warmup_us:
            run.take_snapshot()
        user = run.users[i]
        clock.set(t)
        run.request(user)
        user.local_us = clock.now_us()
        makespan = max(makespan, user.local_us)
        if user.remaining > 0:
            heapq.heappush(heap, (user.local_us, i))
    return run.sample(makespan)


def _run_threaded(run: _Run) -> Sample:
    start = time.monotonic()
    warm_s = run.warmup_us / 1e6

    def worker(user: _User) -> None:
        while user.remaining > 0:
            run.request(user)
            if time.monotonic() - start >= warm_s:
                run.take_snapshot()

    threads = [threading.Thread(target=worker, args=(u,)) for u in run.users]
    if run.config is Configuration.AP:
        run.engine.start()
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        if run.config is Configuration.AP:
            run.engine.stop()
    return run.sample(int((time.monotonic() - start) * 1e6))


def run_simulation(
    app: SyntheticApp,
    spec: WorkloadSpec,
    config: Configuration | str,
    engine_config: Optional[EngineConfig] = None,
    *,
    dev_methods: Sequence[str] = (),
    virtual_time: bool = True,
) -> SimulationReport:
    """Run every user level in *spec* under one configuration."""
    config = Configuration(config)
    engine_config = engine_config or EngineConfig(seed=spec.seed)
    cells = []
    for users in spec.users:
        samples = []
        for rep in range(spec.repetitions):
            clock: Clock = ManualClock(0) if virtual_time else MonotonicClock()
            run = _Run(app, spec, config, users, rep, engine_config, dev_methods, clock)
            samples.append(_run_virtual(run, engine_config) if virtual_time else _run_threaded(run))
        cells.append(
            Cell(
                configuration=config.value,
                users=users,
                throughput=_mean([s.throughput for s in samples]),
                hit_ratio=_mean([s.hit_ratio for s in samples]),
                total_hits=_mean([s.total_hits for s in samples]),
                samples=samples,
            )
        )
    return SimulationReport(cells, spec.seed)


# -- scenario files ----------------------------------------------------------

@dataclass
class Scenario:
    app: SyntheticApp
    workload: WorkloadSpec
    engine: EngineConfig
    configurations: tuple = (Configuration.NO, Configuration.AP)
    dev_methods: tuple = ()
    virtual_time: bool = True

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Scenario":
        if not isinstance(doc, Mapping):
            raise InvalidScenario("scenario must be a JSON object")
        try:
            app = SyntheticApp.from_dict(doc["app"])
            workload = WorkloadSpec(**doc.get("workload", {}))
            engine = EngineConfig.from_mapping(doc.get("engine", {}))
            configs = tuple(Configuration(c) for c in doc.get("configurations", ("NO", "AP")))
            dev = tuple(doc.get("dev_methods", ()))
        except InvalidScenario:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenario(f"bad scenario: {exc}") from exc
        for name in dev:
            if name not in app.methods:
                raise InvalidScenario(f"dev_methods names unknown method {name!r}")
        return cls(app, workload, engine, configs, dev, bool(doc.get("virtual_time", True)))

    @classmethod
    def load(cls, path: str) -> "Scenario":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidScenario(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(doc)

    def run(self, seed: Optional[int] = None) -> SimulationReport:
        workload = self.workload
        if seed is not None:
            workload = WorkloadSpec(
                workload.users, workload.requests_per_user, workload.read_fraction, seed, workload.repetitions
            )
        cells = []
        for config in self.configurations:
            report = run_simulation(
                self.app, workload, config, self.engine,
                dev_methods=self.dev_methods, virtual_time=self.virtual_time,
            )
            cells.extend(report.cells)
        return SimulationReport(cells, workload.seed)


def bookstore_app() -> SyntheticApp:
    """A small storefront with one method of every profile.

    ``best_sellers`` is expensive and called on every read page; ``catalog``
    is the static hot method; ``place_order`` only runs on the write page.
    """
    methods = [
        MethodSpec("catalog", Profile.STATIC, param_space=20, cost_us=500),
        MethodSpec("best_sellers", Profile.EXPENSIVE, param_space=5, cost_us=10_000),
        MethodSpec("stock_level", Profile.VOLATILE, param_space=10, cost_us=300),
        MethodSpec("cart", Profile.USER_SPECIFIC, param_space=3, cost_us=400),
        MethodSpec("prices", Profile.LOW_CHANGE, param_space=20, cost_us=300, change_rate=0.002),
        MethodSpec("place_order", Profile.VOLATILE, param_space=50, cost_us=800),
    ]
    read_links = (Link("home", 1), Link("product", 3), Link("search", 2), Link("basket", 1))
    pages = [
        Page("home", ("best_sellers", "catalog", "cart"), links=read_links + (Link("order", 1),)),
        Page("product", ("best_sellers", "catalog", "prices", "stock_level", "cart"), links=read_links + (Link("order", 1),)),
        Page("search", ("best_sellers", "catalog", "stock_level", "cart"), links=read_links),
        Page("basket", ("best_sellers", "cart", "prices"), links=read_links + (Link("order", 2),)),
        Page("order", ("cart", "place_order", "place_order", "stock_level"), write=True, links=read_links),
    ]
    return SyntheticApp({m.name: m for m in methods}, {p.name: p for p in pages}, "home")
