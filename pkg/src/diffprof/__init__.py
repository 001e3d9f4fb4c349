"""Differential diagnosis of distributed-training profiles.

Per-function behavior patterns (critical-path share, mean and spread of the
governing hardware channel) are summarized on every worker and compared
across workers to localize abnormal function executions.
"""

__version__ = "0.1.0"

from .critical_path import CriticalSegments, compute_critical_segments, critical_time
from .detector import DegradationDetector, DetectorConfig, Marker, MarkerEvent, Tick, Trigger
from .errors import DiffprofError
from .localize import (
    AnomalyReport,
    AnomalyVerdict,
    ExpectedRange,
    LocalizeConfig,
    PatternTable,
    RangePolicy,
    Reason,
    localize,
)
from .patterns import BehaviorPattern, PatternRecord, critical_duration, summarize
from .trace import (
    Channel,
    CommScope,
    FunctionId,
    Kind,
    MetricSeries,
    TraceEvent,
    WorkerTrace,
    load_session,
    load_worker_trace,
    validate_session,
)

__all__ = [
    "AnomalyReport", "AnomalyVerdict", "BehaviorPattern", "Channel", "CommScope",
    "CriticalSegments", "DegradationDetector", "DetectorConfig", "DiffprofError",
    "ExpectedRange", "FunctionId", "Kind", "LocalizeConfig", "Marker", "MarkerEvent",
    "MetricSeries", "PatternRecord", "PatternTable", "RangePolicy", "Reason", "Tick",
    "TraceEvent", "Trigger", "WorkerTrace", "compute_critical_segments", "critical_duration",
    "critical_time", "load_session", "load_worker_trace", "localize", "summarize",
    "validate_session",
]
