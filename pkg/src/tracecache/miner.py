"""Trace mining: per-method statistics, cacheability criteria and the
decision chain that turns them into a :class:`DecisionModel`.

All criterion values are kept as exact fractions internally. Threshold tests
of the form ``x > mean + k * std`` are decided exactly (by comparing squares)
so that ties, which are common in small populations, do not depend on
floating-point rounding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from statistics import NormalDist
from types import MappingProxyType
from typing import Any, Iterable, Iterator, Mapping, Optional

from .recorder import HintMode, TrackingHint, index_hints
from .trace import CallRecord, MalformedRecord, MethodId, parse_record

REPORT_SCHEMA = "tracecache.report/1"


class NoData(ValueError):
    """A criterion was evaluated on a method with no recorded calls."""


class TooManyErrors(ValueError):
    pass


class Decision(str, enum.Enum):
    CACHEABLE = "Cacheable"
    NOT_CACHEABLE = "NotCacheable"
    UNDEFINED = "Undefined"


_DECISION_ORDER = {Decision.CACHEABLE: 0, Decision.NOT_CACHEABLE: 1, Decision.UNDEFINED: 2}


# -- trace input -------------------------------------------------------------

class TraceReader:
    """Iterates CallRecords from trace-log lines, skipping malformed ones.

    Rejected lines are counted in ``malformed`` (with messages in ``errors``);
    once more than ``max_errors`` lines are rejected :class:`TooManyErrors`
    is raised. ``max_errors=None`` tolerates any number.
    """

    def __init__(self, lines: Iterable[str], max_errors: Optional[int] = None) -> None:
        self._lines = lines
        self.max_errors = max_errors
        self.malformed = 0
        self.errors: list[tuple[int, str]] = []

    def __iter__(self) -> Iterator[CallRecord]:
        for lineno, line in enumerate(self._lines, start=1):
            if not line.strip():
                continue
            try:
                yield parse_record(line)
            except MalformedRecord as exc:
                self.malformed += 1
                self.errors.append((lineno, str(exc)))
                if self.max_errors is not None and self.malformed > self.max_errors:
                    raise TooManyErrors(
                        f"{self.malformed} malformed lines (limit {self.max_errors}); "
                        f"last at line {lineno}: {exc}"
                    ) from exc


# -- aggregation -------------------------------------------------------------

@dataclass
class MethodStats:
    method: MethodId
    call_count: int = 0
    p_set: set = field(default_factory=set)
    pr_set: set = field(default_factory=set)
    # distinct params -> sessions that called the method with them
    session_counts: dict = field(default_factory=dict)
    # distinct params -> number of session-tagged calls with them
    session_calls: dict = field(default_factory=dict)
    sessions: set = field(default_factory=set)
    cost_sum: int = 0
    cost_sq_sum: int = 0

    def add(self, rec: CallRecord) -> None:
        params = rec.param_reprs
        self.call_count += 1
        self.p_set.add(params)
        self.pr_set.add((params, rec.result.repr))
        self.cost_sum += rec.cost_us
        self.cost_sq_sum += rec.cost_us * rec.cost_us
        if rec.session is not None:
            self.sessions.add(rec.session)
            self.session_counts.setdefault(params, set()).add(rec.session)
            self.session_calls[params] = self.session_calls.get(params, 0) + 1

    @property
    def p_set_size(self) -> int:
        return len(self.p_set)

    @property
    def pr_set_size(self) -> int:
        return len(self.pr_set)

    @property
    def total_sessions(self) -> int:
        return len(self.sessions)

    @property
    def cost_mean(self) -> float:
        return self.cost_sum / self.call_count if self.call_count else 0.0

    @property
    def cost_sq_mean(self) -> float:
        return self.cost_sq_sum / self.call_count if self.call_count else 0.0


def aggregate(records: Iterable[CallRecord]) -> dict[MethodId, MethodStats]:
    stats: dict[MethodId, MethodStats] = {}
    for rec in records:
        entry = stats.get(rec.method)
        if entry is None:
            entry = stats[rec.method] = MethodStats(rec.method)
        entry.add(rec)
    return stats


# -- criteria ----------------------------------------------------------------

def _require_data(stats: MethodStats) -> None:
    if stats.call_count == 0:
        raise NoData(f"no calls recorded for {stats.method}")


def staticity_exact(stats: MethodStats) -> Fraction:
    _require_data(stats)
    return Fraction(stats.p_set_size, stats.pr_set_size)


def staticity(stats: MethodStats) -> float:
    return float(staticity_exact(stats))


def changeability(stats: MethodStats) -> float:
    return float(1 - staticity_exact(stats))


def share_by_params(stats: MethodStats) -> dict[tuple, Fraction]:
    """Fraction of the method's sessions that called it with each distinct params."""
    total = stats.total_sessions
    if total == 0:
        return {}
    return {p: Fraction(len(users), total) for p, users in stats.session_counts.items()}


def shareability_exact(stats: MethodStats) -> Optional[Fraction]:
    shares = share_by_params(stats)
    if not shares:
        return None
    weighted = sum(stats.session_calls[p] * s for p, s in shares.items())
    return Fraction(weighted) / sum(stats.session_calls[p] for p in shares)


def shareability(stats: MethodStats) -> Optional[float]:
    """Call-weighted mean, over distinct params, of the share of sessions that
    made that call. None when every call was anonymous."""
    value = shareability_exact(stats)
    return None if value is None else float(value)


def required_sample_size(confidence: float, margin: float) -> int:
    """Cochran's sample size for a proportion, worst case p = 0.5."""
    if not 0.0 < confidence < 1.0 or not 0.0 < margin < 1.0:
        raise ValueError("confidence and margin must lie in (0, 1)")
    z = NormalDist().inv_cdf(1.0 - (1.0 - confidence) / 2.0)
    return math.ceil(z * z * 0.25 / (margin * margin))


@dataclass(frozen=True)
class CriteriaThresholds:
    confidence: float = 0.99
    margin: float = 0.03
    k_changeability: float = 0.0
    k_shareability: float = 1.0
    k_expensiveness: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if not 0.0 < self.margin < 1.0:
            raise ValueError("margin must lie in (0, 1)")

    @property
    def sample_size(self) -> int:
        return required_sample_size(self.confidence, self.margin)


# -- model -------------------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    method: MethodId
    decision: Decision
    staticity: Optional[float]
    changeability: Optional[float]
    frequent: bool
    shareability: Optional[float]
    cost_mean: float
    deciding_criterion: str
    call_count: int = 0

    def as_dict(self) -> dict[str, Any]:
        return {
            "method": self.method.signature,
            "decision": self.decision.value,
            "deciding_criterion": self.deciding_criterion,
            "call_count": self.call_count,
            "frequent": self.frequent,
            "staticity": self.staticity,
            "changeability": self.changeability,
            "shareability": self.shareability,
            "cost_mean_us": self.cost_mean,
        }


@dataclass(frozen=True)
class _Moments:
    mean: Fraction
    var: Fraction

    @classmethod
    def of(cls, values: list[Fraction]) -> "_Moments":
        if not values:
            return cls(Fraction(0), Fraction(0))
        n = len(values)
        mean = sum(values, Fraction(0)) / n
        var = sum(((v - mean) ** 2 for v in values), Fraction(0)) / n
        return cls(mean, var)

    @property
    def std(self) -> float:
        return math.sqrt(self.var)

    def compare(self, x: Fraction, k: float) -> int:
        """Sign of ``x - (mean + k * std)``, computed exactly."""
        d = x - self.mean
        kk = Fraction(k)
        if kk == 0 or self.var == 0:
            return (d > 0) - (d < 0)
        if kk > 0:
            if d <= 0:
                return -1
            lhs, rhs = d * d, kk * kk * self.var
            return (lhs > rhs) - (lhs < rhs)
        if d >= 0:
            return 1
        lhs, rhs = d * d, kk * kk * self.var
        return (lhs < rhs) - (lhs > rhs)


@dataclass(frozen=True)
class Population:
    ch_mean: float
    ch_std: float
    sh_mean: float
    sh_std: float
    ct_mean: float
    ct_std: float

    def as_dict(self) -> dict[str, float]:
        return {
            "changeability_mean": self.ch_mean,
            "changeability_std": self.ch_std,
            "shareability_mean": self.sh_mean,
            "shareability_std": self.sh_std,
            "cost_mean_us": self.ct_mean,
            "cost_std_us": self.ct_std,
        }


@dataclass(frozen=True)
class DecisionModel:
    verdicts: Mapping[MethodId, Verdict]
    built_at: int
    population: Population
    thresholds: CriteriaThresholds = CriteriaThresholds()

    def decision(self, method: MethodId) -> Decision:
        verdict = self.verdicts.get(method)
        return verdict.decision if verdict is not None else Decision.UNDEFINED

    def cacheable(self) -> list[MethodId]:
        return sorted(m for m, v in self.verdicts.items() if v.decision is Decision.CACHEABLE)

    def report(self) -> dict[str, Any]:
        rows = sorted(
            self.verdicts.values(),
            key=lambda v: (_DECISION_ORDER[v.decision], -v.cost_mean, v.method.signature),
        )
        return {
            "schema": REPORT_SCHEMA,
            "built_at_us": self.built_at,
            "thresholds": {
                "confidence": self.thresholds.confidence,
                "margin": self.thresholds.margin,
                "k_changeability": self.thresholds.k_changeability,
                "k_shareability": self.thresholds.k_shareability,
                "k_expensiveness": self.thresholds.k_expensiveness,
                "sample_size": self.thresholds.sample_size,
            },
            "population": self.population.as_dict(),
            "methods": [v.as_dict() for v in rows],
        }


_EMPTY_POPULATION = Population(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def build_model(
    stats: Mapping[MethodId, MethodStats],
    thresholds: CriteriaThresholds = CriteriaThresholds(),
    hints: Iterable[TrackingHint] = (),
    built_at: int = 0,
) -> DecisionModel:
    """Evaluate every method against the criteria and run the decision chain.

    Chain, in order: too few calls -> Undefined; completely static ->
    Cacheable; changeability at or above the population reference ->
    NotCacheable; shared -> Cacheable; expensive -> Cacheable; otherwise
    NotCacheable. Hints override the outcome but not the criterion values.
    """
    hint_table = index_hints(hints)
    sample_size = thresholds.sample_size

    live = [s for s in stats.values() if s.call_count > 0]
    ch = {s.method: 1 - staticity_exact(s) for s in live}
    sh = {s.method: shareability_exact(s) for s in live}
    ct = {s.method: Fraction(s.cost_sum, s.call_count) for s in live}
    ch_pop = _Moments.of(list(ch.values()))
    sh_pop = _Moments.of([v for v in sh.values() if v is not None])
    ct_pop = _Moments.of(list(ct.values()))

    verdicts: dict[MethodId, Verdict] = {}
    for s in live:
        m = s.method
        frequent = s.call_count >= sample_size
        if not frequent:
            decision, why = Decision.UNDEFINED, "frequency"
        elif ch[m] == 0:
            decision, why = Decision.CACHEABLE, "staticity"
        elif ch_pop.compare(ch[m], thresholds.k_changeability) >= 0:
            decision, why = Decision.NOT_CACHEABLE, "changeability"
        elif sh[m] is not None and sh_pop.compare(sh[m], thresholds.k_shareability) > 0:
            decision, why = Decision.CACHEABLE, "shareability"
        elif ct_pop.compare(ct[m], thresholds.k_expensiveness) > 0:
            decision, why = Decision.CACHEABLE, "expensiveness"
        else:
            decision, why = Decision.NOT_CACHEABLE, "none"
        decision, why = _apply_hint(hint_table.get(m), decision, why)
        verdicts[m] = Verdict(
            method=m,
            decision=decision,
            staticity=float(1 - ch[m]),
            changeability=float(ch[m]),
            frequent=frequent,
            shareability=None if sh[m] is None else float(sh[m]),
            cost_mean=float(ct[m]),
            deciding_criterion=why,
            call_count=s.call_count,
        )

    for m, mode in hint_table.items():
        if m not in verdicts:
            decision, why = _apply_hint(mode, Decision.UNDEFINED, "no-data")
            verdicts[m] = Verdict(m, decision, None, None, False, None, 0.0, why)

    population = Population(
        float(ch_pop.mean), ch_pop.std, float(sh_pop.mean), sh_pop.std, float(ct_pop.mean), ct_pop.std
    )
    return DecisionModel(MappingProxyType(verdicts), built_at, population, thresholds)


def _apply_hint(mode: Optional[HintMode], decision: Decision, why: str) -> tuple[Decision, str]:
    if mode is HintMode.ALWAYS_CACHE:
        return Decision.CACHEABLE, "hint:AlwaysCache"
    if mode in (HintMode.NEVER_CACHE, HintMode.NEVER_TRACK):
        return Decision.NOT_CACHEABLE, f"hint:{mode.value}"
    return decision, why


def undefined_model(
    methods: Iterable[MethodId],
    thresholds: CriteriaThresholds = CriteriaThresholds(),
    hints: Iterable[TrackingHint] = (),
    built_at: int = 0,
) -> DecisionModel:
    """A model that withholds judgement on every method (hints still apply)."""
    hint_table = index_hints(hints)
    verdicts = {}
    for m in set(methods) | set(hint_table):
        decision, why = _apply_hint(hint_table.get(m), Decision.UNDEFINED, "warmup")
        verdicts[m] = Verdict(m, decision, None, None, False, None, 0.0, why)
    return DecisionModel(MappingProxyType(verdicts), built_at, _EMPTY_POPULATION, thresholds)
