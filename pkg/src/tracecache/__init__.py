"""Adaptive application-level caching driven by mined call traces."""

from .cache import AdmitOutcome, AdmitResult, CacheConfig, CacheStore, OversizedItem, Policy
from .clock import ManualClock, MonotonicClock
from .controller import Engine, EngineConfig, InsufficientData, load_config, session_scope
from .miner import (
    CriteriaThresholds,
    Decision,
    DecisionModel,
    MethodStats,
    Verdict,
    aggregate,
    build_model,
    changeability,
    required_sample_size,
    shareability,
    staticity,
)
from .recorder import DuplicateHint, HintMode, Recorder, RecorderConfig, TrackingHint
from .trace import (
    CallKey,
    CallRecord,
    CanonicalValue,
    MethodId,
    UnsupportedValue,
    call_key,
    canonicalize,
    parse_record,
    serialize_record,
)

__version__ = "0.1.0"

__all__ = [
    "AdmitOutcome",
    "AdmitResult",
    "CacheConfig",
    "CacheStore",
    "CallKey",
    "CallRecord",
    "CanonicalValue",
    "CriteriaThresholds",
    "Decision",
    "DecisionModel",
    "DuplicateHint",
    "Engine",
    "EngineConfig",
    "HintMode",
    "InsufficientData",
    "ManualClock",
    "MethodId",
    "MethodStats",
    "MonotonicClock",
    "OversizedItem",
    "Policy",
    "Recorder",
    "RecorderConfig",
    "TrackingHint",
    "UnsupportedValue",
    "Verdict",
    "aggregate",
    "build_model",
    "call_key",
    "canonicalize",
    "changeability",
    "load_config",
    "parse_record",
    "required_sample_size",
    "serialize_record",
    "session_scope",
    "shareability",
    "staticity",
]
