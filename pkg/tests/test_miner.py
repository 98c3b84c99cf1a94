from __future__ import annotations

import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tracecache.miner import (
    REPORT_SCHEMA,
    CriteriaThresholds,
    Decision,
    MethodStats,
    NoData,
    TooManyErrors,
    TraceReader,
    _Moments,
    aggregate,
    build_model,
    changeability,
    required_sample_size,
    share_by_params,
    shareability,
    staticity,
)
from tracecache.recorder import HintMode, TrackingHint
from tracecache.trace import CallRecord, MethodId, canonicalize, serialize_record

M = MethodId("app.m/1")

# confidence 0.5 / margin 0.5 needs a single observation: every method is frequent
ONE = dict(confidence=0.5, margin=0.5)


def call(p, r, session=None, cost=100, method=M, at=0):
    params = tuple(canonicalize(x) for x in (p if isinstance(p, tuple) else (p,)))
    return CallRecord(method, params, canonicalize(r), cost, session, at)


def stats_for(calls):
    return aggregate(calls)[calls[0].method]


def test_aggregate_hand_enumerated_sets():
    s = stats_for([call(1, 10), call(1, 10), call(2, 20), call(2, 21)])
    assert (s.p_set_size, s.pr_set_size, s.call_count) == (2, 3, 4)


def test_aggregate_absent_method():
    assert MethodId("app.none/0") not in aggregate([call(1, 1)])
    assert aggregate([]) == {}


def test_aggregate_identical_records():
    s = stats_for([call(5, 5)] * 1000)
    assert (s.p_set_size, s.pr_set_size, s.call_count) == (1, 1, 1000)


def test_anonymous_calls_count_but_carry_no_sessions():
    s = stats_for([call(1, 1), call(1, 1, "u1")])
    assert s.call_count == 2
    assert s.total_sessions == 1
    assert s.session_counts == {("i:1",): {"u1"}}


def test_cost_moments():
    s = stats_for([call(1, 1, cost=100), call(1, 1, cost=300)])
    assert s.cost_mean == 200
    assert s.cost_sq_mean == (100**2 + 300**2) / 2


def test_staticity_examples():
    assert staticity(stats_for([call(1, 10), call(1, 10), call(2, 20), call(2, 21)])) == pytest.approx(2 / 3)
    assert staticity(stats_for([call(1, 1)] * 3)) == 1.0
    assert staticity(stats_for([call(1, 1), call(1, 2)])) == 0.5


def test_changeability_is_dual():
    assert changeability(stats_for([call(1, 1)] * 3)) == 0.0
    assert changeability(stats_for([call(1, 10), call(1, 10), call(2, 20), call(2, 21)])) == pytest.approx(1 / 3)
    assert changeability(stats_for([call(1, 1), call(1, 2)])) == 0.5


def test_criteria_need_data():
    with pytest.raises(NoData):
        staticity(MethodStats(M))
    with pytest.raises(NoData):
        changeability(MethodStats(M))


def test_share_of_one_params_list():
    calls = [call(1, 1, u) for u in ("u1", "u2", "u3")] + [call(2, 2, "u4")]
    s = stats_for(calls)
    assert share_by_params(s)[("i:1",)] == Fraction(3, 4)
    # call-weighted over both params lists: (3 * 3/4 + 1 * 1/4) / 4
    assert shareability(s) == pytest.approx(0.625)


def test_shareability_absent_for_anonymous_methods():
    assert shareability(stats_for([call(1, 1), call(2, 2)])) is None


def test_shareability_single_session():
    assert shareability(stats_for([call(1, 1, "u1")] * 4)) == 1.0


@pytest.mark.parametrize(
    "confidence, margin, expected",
    [(0.99, 0.03, 1844), (0.95, 0.05, 385), (0.99, 0.999999, 2)],
)
def test_required_sample_size(confidence, margin, expected):
    assert required_sample_size(confidence, margin) == expected
    assert oracles.sample_size(confidence, margin) == expected


def test_default_thresholds():
    t = CriteriaThresholds()
    assert (t.confidence, t.margin, t.k_changeability, t.k_shareability, t.k_expensiveness) == (
        0.99, 0.03, 0.0, 1.0, 1.0,
    )
    assert t.sample_size == 1844
    with pytest.raises(ValueError):
        CriteriaThresholds(confidence=1.0)
    with pytest.raises(ValueError):
        CriteriaThresholds(margin=0.0)


def test_static_frequent_method_is_cacheable():
    model = build_model(aggregate([call(1, 1)] * 2000))
    v = model.verdicts[M]
    assert v.decision is Decision.CACHEABLE
    assert v.deciding_criterion == "staticity"
    assert v.frequent


def test_infrequent_method_is_undefined():
    v = build_model(aggregate([call(i, i) for i in range(10)])).verdicts[M]
    assert v.decision is Decision.UNDEFINED
    assert not v.frequent


def _population():
    """Five methods, one per branch of the decision chain (sample size 1)."""
    a, b, c, d, e = (MethodId(f"app.{n}/1") for n in "abcde")
    calls = []
    calls += [call(1, 1, method=a)] * 3  # static
    calls += [call(1, i, method=b) for i in range(4)]  # changes a lot
    # low changeability, every params list requested by every session
    calls += [call(p, 0, u, method=c) for p in range(6) for u in ("u1", "u2", "u3")]
    calls += [call(0, 1, "u1", method=c)]
    # low changeability, one session per params list, expensive
    calls += [call(p, 0, f"w{p}", cost=10_000, method=d) for p in range(6)]
    calls += [call(0, 1, "w0", cost=10_000, method=d)]
    # low changeability, one session per params list, cheap
    calls += [call(p, 0, f"v{p}", method=e) for p in range(6)] + [call(0, 1, "v0", method=e)]
    return (a, b, c, d, e), calls


def test_chain_branches():
    (a, b, c, d, e), calls = _population()
    model = build_model(aggregate(calls), CriteriaThresholds(**ONE))
    got = {m: (model.verdicts[m].decision, model.verdicts[m].deciding_criterion) for m in (a, b, c, d, e)}
    assert got == {
        a: (Decision.CACHEABLE, "staticity"),
        b: (Decision.NOT_CACHEABLE, "changeability"),
        c: (Decision.CACHEABLE, "shareability"),
        d: (Decision.CACHEABLE, "expensiveness"),
        e: (Decision.NOT_CACHEABLE, "none"),
    }


def _raw(calls):
    return [
        oracles.RawCall(c.method.signature, c.param_reprs, c.result.repr, c.cost_us, c.session) for c in calls
    ]


def test_five_method_population_matches_oracle():
    _, calls = _population()
    model = build_model(aggregate(calls), CriteriaThresholds(**ONE))
    expected = oracles.mine(_raw(calls), ONE["confidence"], ONE["margin"], 0.0, 1.0, 1.0)
    assert {m.signature: v.decision.value for m, v in model.verdicts.items()} == {
        m: v.decision for m, v in expected.items()
    }


def test_population_moments():
    (a, b, c, d, e), calls = _population()
    model = build_model(aggregate(calls), CriteriaThresholds(**ONE))
    ch = [float(v.changeability) for v in model.verdicts.values()]
    pop = model.population
    assert pop.ch_mean == pytest.approx(sum(ch) / 5)
    assert pop.ch_std == pytest.approx(math.sqrt(sum((x - pop.ch_mean) ** 2 for x in ch) / 5))


def test_changeability_at_reference_is_rejected():
    # two methods with equal changeability: both sit exactly on mean + 0 * std
    x, y = MethodId("app.x/1"), MethodId("app.y/1")
    calls = [call(1, 1, method=x), call(1, 2, method=x), call(1, 1, method=y), call(1, 2, method=y)]
    model = build_model(aggregate(calls), CriteriaThresholds(**ONE))
    for m in (x, y):
        assert model.verdicts[m].decision is Decision.NOT_CACHEABLE
        assert model.verdicts[m].deciding_criterion == "changeability"


def test_exact_threshold_comparison():
    pop = _Moments.of([Fraction(3, 10), Fraction(24, 10)])
    # mean + std is exactly 2.4; naive float arithmetic lands just below it
    mean, std = (0.3 + 2.4) / 2, math.sqrt(((0.3 - 1.35) ** 2 + (2.4 - 1.35) ** 2) / 2)
    assert mean + std < 2.4
    assert pop.compare(Fraction(24, 10), 1.0) == 0
    assert pop.compare(Fraction(24, 10), 0.999) > 0
    assert pop.compare(Fraction(3, 10), -1.0) == 0
    assert pop.compare(Fraction(4, 10), -1.0) > 0
    assert pop.compare(Fraction(0), -1.0) < 0


def test_hints_override_verdicts():
    static = [call(1, 1)] * 5
    hints = [TrackingHint(M, HintMode.NEVER_CACHE)]
    v = build_model(aggregate(static), CriteriaThresholds(**ONE), hints).verdicts[M]
    assert v.decision is Decision.NOT_CACHEABLE
    assert v.staticity == 1.0  # criterion values are still reported


def test_always_cache_hint_without_traces():
    model = build_model({}, hints=[TrackingHint(M, HintMode.ALWAYS_CACHE)])
    assert model.verdicts[M].decision is Decision.CACHEABLE
    assert model.decision(MethodId("app.unknown/0")) is Decision.UNDEFINED


def test_build_model_is_deterministic():
    _, calls = _population()
    t = CriteriaThresholds(**ONE)
    assert build_model(aggregate(calls), t).report() == build_model(aggregate(list(reversed(calls))), t).report()


def test_report_ordering_and_schema():
    (a, b, c, d, e), calls = _population()
    report = build_model(aggregate(calls), CriteriaThresholds(**ONE)).report()
    assert report["schema"] == REPORT_SCHEMA
    rows = [(r["decision"], r["cost_mean_us"]) for r in report["methods"]]
    order = {"Cacheable": 0, "NotCacheable": 1, "Undefined": 2}
    assert rows == sorted(rows, key=lambda r: (order[r[0]], -r[1]))
    assert report["methods"][0]["method"] == "app.d/1"  # the expensive cacheable one


def test_trace_reader_skips_and_counts_malformed():
    good = serialize_record(call(1, 1))
    reader = TraceReader([good, "garbage", "", good, "{}"])
    assert len(list(reader)) == 2
    assert reader.malformed == 2
    with pytest.raises(TooManyErrors):
        list(TraceReader([good, "garbage", "garbage"], max_errors=1))


# -- properties -----------------------------------------------------------------

small_calls = st.lists(
    st.tuples(st.integers(0, 3), st.integers(0, 3), st.sampled_from([None, "u1", "u2", "u3"])),
    min_size=1,
    max_size=40,
)


@settings(max_examples=200, deadline=None)
@given(small_calls)
def test_staticity_plus_changeability_is_one(raw):
    s = stats_for([call(p, r, u) for p, r, u in raw])
    assert abs(staticity(s) + changeability(s) - 1.0) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(small_calls, st.data())
def test_staticity_monotonicity(raw, data):
    calls = [call(p, r, u) for p, r, u in raw]
    before = staticity(stats_for(calls))
    p, r, u = data.draw(st.sampled_from(raw))
    assert staticity(stats_for(calls + [call(p, r, None)])) >= before
    assert staticity(stats_for(calls + [call(p, 99, None)])) <= before


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(0, 2), st.integers(0, 2),
                          st.sampled_from([None, "u1", "u2"]), st.integers(0, 500)), min_size=1, max_size=60))
def test_metrics_match_brute_force(raw):
    calls = [call(p, r, u, cost=c, method=MethodId(f"app.{m}/1")) for m, p, r, u, c in raw]
    model = build_model(aggregate(calls), CriteriaThresholds(**ONE))
    expected = oracles.mine(_raw(calls), ONE["confidence"], ONE["margin"], 0.0, 1.0, 1.0)
    for mid, v in model.verdicts.items():
        o = expected[mid.signature]
        assert v.decision.value == o.decision
        assert v.staticity == pytest.approx(float(o.staticity), abs=1e-12)
        assert (v.shareability is None) == (o.shareability is None)
        if v.shareability is not None:
            assert v.shareability == pytest.approx(float(o.shareability), abs=1e-12)
        assert v.cost_mean == pytest.approx(float(o.cost_mean), abs=1e-9)


def test_random_population_determinism():
    rng = random.Random(5)
    calls = [call(rng.randrange(3), rng.randrange(2), rng.choice([None, "a", "b"]),
                  method=MethodId(f"app.{rng.randrange(4)}/1")) for _ in range(300)]
    t = CriteriaThresholds(**ONE)
    assert build_model(aggregate(calls), t) == build_model(aggregate(calls), t)
