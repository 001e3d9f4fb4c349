from __future__ import annotations

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from diffprof import _intervals as iv
from diffprof.critical_path import compute_critical_segments, critical_time
from diffprof.trace import CommScope, FunctionId, Kind, TraceEvent, WorkerTrace, sort_and_nest
from oracles import critical_segments_oracle, random_trace

PY_A = FunctionId(Kind.PYTHON, "a", ("m",))
PY_B = FunctionId(Kind.PYTHON, "b", ("m", "a"))
GPU = FunctionId(Kind.GPU_KERNEL, "k")
MEM = FunctionId(Kind.MEMORY_OP, "cp")
COMM = FunctionId(Kind.COLLECTIVE, "ar", (), CommScope.INTER)


def _trace(events, window=(0, 100)):
    return WorkerTrace(0, window, sort_and_nest(events))


def test_priority_masking():
    tr = _trace([
        TraceEvent(0, COMM, 0, 100, 8),
        TraceEvent(0, GPU, 20, 40, 7),
        TraceEvent(0, MEM, 30, 60, 10),
    ])
    seg = compute_critical_segments(tr)
    assert seg.intervals(GPU) == [(20, 40)]
    assert seg.intervals(MEM) == [(40, 60)]
    assert seg.intervals(COMM) == [(0, 20), (60, 100)]


def test_python_self_time_and_threads():
    tr = _trace([
        TraceEvent(0, PY_A, 0, 100, 1, None, True),
        TraceEvent(0, PY_B, 10, 30, 1, None, True),
        TraceEvent(0, COMM, 50, 60, 1),  # launched from the frame: a child of any kind
        TraceEvent(0, PY_A, 0, 100, 2, None, False),
    ])
    seg = compute_critical_segments(tr)
    assert seg.intervals(PY_B) == [(10, 30)]
    assert seg.intervals(PY_A) == [(0, 10), (30, 50), (60, 100)]
    assert seg.intervals(COMM) == [(50, 60)]


def test_equal_priority_share():
    other = FunctionId(Kind.GPU_KERNEL, "k2")
    tr = _trace([TraceEvent(0, GPU, 0, 50, 7), TraceEvent(0, other, 25, 75, 11)])
    seg = compute_critical_segments(tr)
    assert critical_time(seg, GPU) == 50 and critical_time(seg, other) == 50


def test_clipped_to_window():
    tr = _trace([TraceEvent(0, GPU, -20, 30, 7), TraceEvent(0, GPU, 90, 150, 7)])
    assert compute_critical_segments(tr).intervals(GPU) == [(0, 30), (90, 100)]


def test_oracle_equivalence_seeded():
    for seed in range(60):
        tr = random_trace(np.random.default_rng(seed))
        assert compute_critical_segments(tr).segments == critical_segments_oracle(tr), seed


@given(st.integers(0, 2**32 - 1))
def test_oracle_equivalence_property(seed):
    tr = random_trace(np.random.default_rng(seed), max_events=40)
    assert compute_critical_segments(tr).segments == critical_segments_oracle(tr)


@given(st.integers(0, 2**32 - 1), st.integers(0, 199), st.integers(1, 80),
       st.sampled_from([GPU, MEM, COMM]))
def test_monotonic_under_added_higher_priority(seed, s, length, f):
    tr = random_trace(np.random.default_rng(seed), max_events=40)
    before = compute_critical_segments(tr)
    extra = TraceEvent(0, f, s, s + length, 99)
    after = compute_critical_segments(_trace(list(tr.events) + [extra], tr.window))
    for g in set(before.segments) | set(after.segments):
        if g.kind.priority < f.kind.priority:
            assert critical_time(after, g) <= critical_time(before, g)


@given(st.integers(0, 2**32 - 1))
def test_masking_completeness(seed):
    tr = random_trace(np.random.default_rng(seed))
    seg = compute_critical_segments(tr)
    gpu = iv.merge([(e.start, e.end) for e in tr.events if e.function.kind is Kind.GPU_KERNEL])
    for f, spans in seg.segments.items():
        if f.kind is not Kind.GPU_KERNEL:
            assert iv.total(iv.subtract(spans, gpu)) == iv.total(spans)
        assert iv.total(spans) <= tr.window_length


@given(st.lists(st.tuples(st.integers(0, 60), st.integers(1, 20)), max_size=12),
       st.lists(st.tuples(st.integers(0, 60), st.integers(1, 20)), max_size=12))
def test_interval_algebra_against_point_sets(a, b):
    a = [(s, s + d) for s, d in a]
    b = [(s, s + d) for s, d in b]

    def points(spans):
        return {t for s, e in spans for t in range(s, e)}

    merged = iv.merge(a)
    assert points(merged) == points(a)
    assert all(x[1] < y[0] for x, y in zip(merged, merged[1:]))
    assert points(iv.subtract(merged, iv.merge(b))) == points(a) - points(b)
