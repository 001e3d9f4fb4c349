"""Per-worker critical-path segments.

A function is on the critical path at time t when one of its executions
covers t and no execution of a strictly higher priority class does
(GPU kernel > memory op > collective > Python). A Python execution only
counts on the training thread and only while none of its children runs.
Equal-priority functions may share the critical path.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from . import _intervals as iv
from .trace import FunctionId, Kind, TraceEvent, WorkerTrace


@dataclass
class CriticalSegments:
    worker: int
    segments: dict[FunctionId, list[tuple[int, int]]] = field(default_factory=dict)

    def intervals(self, f: FunctionId) -> list[tuple[int, int]]:
        return self.segments.get(f, [])


def _python_self_time(events: list[TraceEvent]) -> dict[int, list[tuple[int, int]]]:
    """Intervals where each training-thread Python event has no running child."""
    children: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for ev in events:
        if ev.parent_index is not None:
            children[ev.parent_index].append((ev.start, ev.end))
    out = {}
    for idx, ev in enumerate(events):
        if ev.function.kind is Kind.PYTHON and ev.is_training_thread:
            own = [(ev.start, ev.end)]
            kids = children.get(idx)
            out[idx] = iv.subtract(own, iv.merge(kids)) if kids else own
    return out


def compute_critical_segments(trace: WorkerTrace, clip_to_window: bool = True) -> CriticalSegments:
    events = trace.events
    by_level: dict[int, list[tuple[int, int]]] = defaultdict(list)
    per_function: dict[FunctionId, list[tuple[int, int]]] = defaultdict(list)
    python_self = _python_self_time(events)

    for idx, ev in enumerate(events):
        kind = ev.function.kind
        by_level[kind.priority].append((ev.start, ev.end))
        if kind is Kind.PYTHON:
            if idx in python_self:
                per_function[ev.function].extend(python_self[idx])
        else:
            per_function[ev.function].append((ev.start, ev.end))

    # mask[L] = everything executing at a level strictly above L
    masks: dict[int, list[tuple[int, int]]] = {}
    above: list[tuple[int, int]] = []
    for level in (3, 2, 1, 0):
        masks[level] = above
        above = iv.merge(above + by_level.get(level, []))

    lo, hi = trace.window
    segments = {}
    for f, spans in per_function.items():
        crit = iv.subtract(iv.merge(spans), masks[f.kind.priority])
        if clip_to_window:
            crit = iv.clip(crit, lo, hi)
        if crit:
            segments[f] = crit
    return CriticalSegments(trace.worker, segments)


def critical_time(segments: CriticalSegments, f: FunctionId) -> int:
    return iv.total(segments.intervals(f))
