"""Bounded in-memory result store with size-gated admission and TTL expiry."""

from __future__ import annotations

import enum
import heapq
import itertools
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Optional

from .clock import Clock, MonotonicClock, seconds_to_us
from .trace import CallKey, CanonicalValue


class Policy(str, enum.Enum):
    TTL_ONLY = "TtlOnly"
    LRU = "LRU"
    LFU = "LFU"


@dataclass(frozen=True)
class CacheConfig:
    capacity: int = 64 * 1024 * 1024
    ttl: float = 300.0
    policy: Policy = Policy.TTL_ONLY

    def __post_init__(self) -> None:
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if self.ttl <= 0:
            raise ValueError("ttl must be positive")

    @property
    def ttl_us(self) -> int:
        return seconds_to_us(self.ttl)


class OversizedItem(ValueError):
    """The item can never fit, however empty the store is."""


class AdmitOutcome(str, enum.Enum):
    ADMITTED = "Admitted"
    REJECTED_SIZE = "RejectedSize"
    EVICTED = "Evicted"
    PRESENT = "Present"  # a concurrent caller already admitted the key


@dataclass(frozen=True)
class AdmitResult:
    outcome: AdmitOutcome
    evicted: tuple = ()


@dataclass
class CacheEntry:
    key: CallKey
    result: CanonicalValue
    value: Any
    size: int
    inserted_at: int
    last_access: int
    access_count: int = 0
    cost_us: int = 0
    seq: int = 0
    touched: int = 0


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    admissions: int = 0
    rejections_size: int = 0
    expirations: int = 0
    evictions: int = 0

    @property
    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


NOT_FOUND = None


class CacheStore:
    """Thread-safe store keyed by :class:`CallKey`.

    Admission requires ``size < capacity - used_bytes``. Under ``TtlOnly`` a
    failing item is simply rejected and space only comes back as entries
    expire; ``LRU``/``LFU`` evict until the item fits. Expiry is measured from
    insertion, never refreshed by reads.
    """

    def __init__(self, config: Optional[CacheConfig] = None, clock: Optional[Clock] = None) -> None:
        self.config = config or CacheConfig()
        self.clock = clock or MonotonicClock()
        self.stats = CacheStats()
        self.used_bytes = 0
        self._ttl = self.config.ttl_us
        self._entries: dict[CallKey, CacheEntry] = {}
        self._recency: OrderedDict[CallKey, None] = OrderedDict()
        self._expiry: list[tuple[int, int, CallKey]] = []
        self._seq = itertools.count()
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CallKey) -> bool:
        return key in self._entries

    def _now(self, now: Optional[int]) -> int:
        return self.clock.now_us() if now is None else now

    def _remove(self, entry: CacheEntry) -> None:
        del self._entries[entry.key]
        self._recency.pop(entry.key, None)
        self.used_bytes -= entry.size

    def _expired(self, entry: CacheEntry, now: int) -> bool:
        return now - entry.inserted_at >= self._ttl

    def lookup(self, key: CallKey, now: Optional[int] = None) -> Optional[CacheEntry]:
        """Return the live entry for *key* (counting a hit) or None (a miss)."""
        now = self._now(now)
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and self._expired(entry, now):
                self._remove(entry)
                self.stats.expirations += 1
                entry = None
            if entry is None:
                self.stats.misses += 1
                return None
            self.stats.hits += 1
            entry.access_count += 1
            entry.last_access = now
            entry.touched = next(self._seq)
            self._recency.move_to_end(key)
            return entry

    def get(self, key: CallKey, now: Optional[int] = None) -> Optional[CanonicalValue]:
        entry = self.lookup(key, now)
        return entry.result if entry is not None else NOT_FOUND

    def _victim(self) -> CacheEntry:
        if self.config.policy is Policy.LRU:
            return self._entries[next(iter(self._recency))]
        # least frequent; among equals the least recently touched
        return min(self._entries.values(), key=lambda e: (e.access_count, e.touched))

    def admit(
        self,
        key: CallKey,
        result: CanonicalValue,
        now: Optional[int] = None,
        *,
        value: Any = None,
        cost_us: int = 0,
    ) -> AdmitResult:
        size = result.size_estimate
        if size >= self.config.capacity:
            raise OversizedItem(f"{size} bytes never fits a {self.config.capacity}-byte cache")
        now = self._now(now)
        with self._lock:
            self._sweep(now)
            if key in self._entries:
                return AdmitResult(AdmitOutcome.PRESENT)
            evicted = []
            while not size < self.config.capacity - self.used_bytes:
                if self.config.policy is Policy.TTL_ONLY:
                    self.stats.rejections_size += 1
                    return AdmitResult(AdmitOutcome.REJECTED_SIZE)
                victim = self._victim()
                self._remove(victim)
                self.stats.evictions += 1
                evicted.append(victim.key)
            seq = next(self._seq)
            self._entries[key] = CacheEntry(
                key, result, value, size, now, now, 0, cost_us, seq, seq
            )
            self._recency[key] = None
            heapq.heappush(self._expiry, (now, seq, key))
            self.used_bytes += size
            self.stats.admissions += 1
        if evicted:
            return AdmitResult(AdmitOutcome.EVICTED, tuple(evicted))
        return AdmitResult(AdmitOutcome.ADMITTED)

    def _sweep(self, now: int) -> int:
        removed = 0
        heap = self._expiry
        while heap and now - heap[0][0] >= self._ttl:
            _, seq, key = heapq.heappop(heap)
            entry = self._entries.get(key)
            # stale heap slots belong to entries already evicted or re-admitted
            if entry is not None and entry.seq == seq:
                self._remove(entry)
                self.stats.expirations += 1
                removed += 1
        return removed

    def sweep(self, now: Optional[int] = None) -> int:
        """Drop every expired entry; returns how many were removed."""
        with self._lock:
            return self._sweep(self._now(now))

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self._recency.clear()
            self._expiry.clear()
            self.used_bytes = 0
            self.stats = CacheStats()

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            s = self.stats
            return {
                "hits": s.hits,
                "misses": s.misses,
                "hit_ratio": s.hit_ratio,
                "admissions": s.admissions,
                "rejections_size": s.rejections_size,
                "expirations": s.expirations,
                "evictions": s.evictions,
                "used_bytes": self.used_bytes,
                "live_entries": len(self._entries),
                "capacity": self.config.capacity,
            }
