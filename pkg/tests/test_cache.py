from __future__ import annotations

import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracecache.cache import (
    AdmitOutcome,
    CacheConfig,
    CacheStore,
    OversizedItem,
    Policy,
)
from tracecache.clock import ManualClock
from tracecache.trace import CanonicalValue, MethodId, call_key, canonicalize

M = MethodId("app.m/1")
SECOND = 1_000_000


def key(i):
    return call_key(M, [canonicalize(i)])


def blob(size, tag="x"):
    return CanonicalValue(f"s:{tag!r}", size)


def store(capacity=1024, ttl=10.0, policy=Policy.TTL_ONLY, clock=None):
    clock = clock or ManualClock(0)
    return CacheStore(CacheConfig(capacity, ttl, policy), clock), clock


def test_get_on_empty_store_misses():
    s, _ = store()
    assert s.get(key(1)) is None
    assert s.stats.misses == 1 and s.stats.hits == 0


def test_put_then_get_within_ttl_hits():
    s, clock = store()
    value = canonicalize([1, 2])
    s.admit(key(1), value)
    clock.advance(9 * SECOND)
    assert s.get(key(1)) == value
    assert s.stats.hits == 1


def test_expired_entry_is_removed_on_access():
    s, clock = store()
    s.admit(key(1), canonicalize(1))
    clock.advance(10 * SECOND)
    assert s.get(key(1)) is None
    assert key(1) not in s
    assert s.used_bytes == 0
    assert s.stats.expirations == 1


def test_ttl_runs_from_insertion_not_last_read():
    s, clock = store()
    s.admit(key(1), canonicalize(1))
    for _ in range(9):
        clock.advance(SECOND)
        assert s.get(key(1)) is not None
    clock.advance(SECOND)
    assert s.get(key(1)) is None


def test_admit_fits():
    s, _ = store()
    assert s.admit(key(1), blob(512)).outcome is AdmitOutcome.ADMITTED
    assert s.used_bytes == 512


def _fill_900(s, clock):
    for i, size in enumerate((400, 300, 200)):
        s.admit(key(i), blob(size, i))
        clock.advance(1)
    assert s.used_bytes == 900


def test_ttl_only_rejects_without_evicting():
    s, clock = store()
    _fill_900(s, clock)
    before = s.snapshot()
    result = s.admit(key(9), blob(200))
    assert result.outcome is AdmitOutcome.REJECTED_SIZE
    assert s.used_bytes == 900 and len(s) == 3
    assert key(9) not in s
    assert s.stats.evictions == 0
    assert s.stats.rejections_size == before["rejections_size"] + 1


def test_strict_inequality_at_the_boundary():
    s, _ = store(capacity=1000)
    s.admit(key(1), blob(800))
    # 200 < 1000 - 800 is false
    assert s.admit(key(2), blob(200)).outcome is AdmitOutcome.REJECTED_SIZE
    assert s.admit(key(3), blob(199)).outcome is AdmitOutcome.ADMITTED


def _lru_oracle(sizes, access_order, capacity, incoming):
    """Replay LRU eviction with an explicit recency list."""
    order = list(access_order)  # least recent first
    used = sum(sizes.values())
    evicted = []
    while not incoming < capacity - used:
        victim = order.pop(0)
        used -= sizes[victim]
        evicted.append(victim)
    return evicted


@pytest.mark.parametrize("reads", [[], [0], [1, 0], [2, 0, 1], [0, 1, 2, 0]])
def test_lru_eviction_matches_replay(reads):
    s, clock = store(policy=Policy.LRU)
    _fill_900(s, clock)
    order = [0, 1, 2]
    for i in reads:
        assert s.get(key(i)) is not None
        order.remove(i)
        order.append(i)
    expected = _lru_oracle({0: 400, 1: 300, 2: 200}, order, 1024, 200)
    result = s.admit(key(9), blob(200))
    assert result.outcome is AdmitOutcome.EVICTED
    assert list(result.evicted) == [key(i) for i in expected]
    assert s.used_bytes == 900 - sum({0: 400, 1: 300, 2: 200}[i] for i in expected) + 200


def test_lfu_evicts_least_frequent_then_least_recent():
    s, clock = store(capacity=100, policy=Policy.LFU)
    for i in range(3):
        s.admit(key(i), blob(30, i))
    s.get(key(0))
    s.get(key(0))
    s.get(key(2))
    s.get(key(1))
    # counts: 0 -> 2, 1 -> 1, 2 -> 1; key 2 was touched before key 1
    result = s.admit(key(9), blob(30))
    assert result.evicted == (key(2),)


def test_lfu_never_read_entries_go_first_in_insertion_order():
    s, _ = store(capacity=100, policy=Policy.LFU)
    for i in range(3):
        s.admit(key(i), blob(30, i))
    s.get(key(0))
    assert s.admit(key(9), blob(30)).evicted == (key(1),)


def test_oversized_item():
    s, _ = store(capacity=1024, policy=Policy.LRU)
    with pytest.raises(OversizedItem):
        s.admit(key(1), blob(1024))
    assert len(s) == 0


def test_admit_of_live_key_reports_present():
    s, _ = store()
    s.admit(key(1), blob(10))
    assert s.admit(key(1), blob(10)).outcome is AdmitOutcome.PRESENT
    assert s.used_bytes == 10 and s.stats.admissions == 1


def test_sweep_examples():
    s, clock = store()
    assert s.sweep() == 0
    sizes = [10, 20, 30, 40, 50]
    for i, size in enumerate(sizes):
        s.admit(key(i), blob(size, i))
        if i == 2:
            clock.advance(5 * SECOND)
    clock.advance(6 * SECOND)  # the first three are 11 s old, the last two 6 s
    assert s.sweep() == 3
    assert s.used_bytes == 90
    assert s.sweep() == 0
    assert s.stats.expirations == 3


def test_config_validation():
    for bad in ({"capacity": 0}, {"ttl": 0}, {"policy": "FIFO"}):
        with pytest.raises(ValueError):
            CacheConfig(**bad)
    assert CacheConfig(policy="LRU").policy is Policy.LRU


def test_snapshot_fields():
    s, _ = store()
    s.admit(key(1), blob(10))
    s.get(key(1))
    s.get(key(2))
    snap = s.snapshot()
    assert snap["hits"] == 1 and snap["misses"] == 1
    assert snap["hit_ratio"] == 0.5
    assert snap["used_bytes"] == 10 and snap["live_entries"] == 1


def test_concurrent_stats_are_exact():
    s = CacheStore(CacheConfig(capacity=10**9, ttl=3600))
    for i in range(50):
        s.admit(key(i), blob(10, i))
    per_thread = 2000

    def work(seed):
        rng = random.Random(seed)
        for _ in range(per_thread):
            s.get(key(rng.randrange(100)))

    threads = [threading.Thread(target=work, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert s.stats.hits + s.stats.misses == 8 * per_thread
    assert sum(e.access_count for e in s._entries.values()) == s.stats.hits


ops = st.lists(
    st.tuples(
        st.sampled_from(["admit", "get", "sweep", "tick"]),
        st.integers(0, 30),
        st.integers(1, 400),
    ),
    max_size=200,
)


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(list(Policy)), ops)
def test_conservation_and_capacity(policy, seq):
    s, clock = store(capacity=1000, ttl=5.0, policy=policy)
    for op, k, n in seq:
        if op == "admit":
            if key(k) not in s:
                s.admit(key(k), blob(n, k))
        elif op == "get":
            s.get(key(k))
        elif op == "sweep":
            s.sweep()
        else:
            clock.advance(n * 10_000)
        st_ = s.stats
        assert s.used_bytes <= 1000
        assert st_.admissions - st_.expirations - st_.evictions == len(s)
        assert s.used_bytes == sum(e.size for e in s._entries.values())
    if policy is Policy.TTL_ONLY:
        assert s.stats.evictions == 0
