from __future__ import annotations

import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffprof.detector import (
    DegradationDetector,
    DetectorConfig,
    Marker,
    MarkerEvent,
    State,
    Tick,
    marker_for_name,
    parse_marker_lines,
)
from diffprof.errors import MalformedRecord, OutOfOrderEvent
from diffprof.simulator import NS, marker_stream

NEXT, STEP = Marker.NEXT, Marker.STEP


def _run(events, **cfg):
    det = DegradationDetector(DetectorConfig(**cfg))
    return det, det.run(events)


def test_learns_after_m_repetitions():
    det = DegradationDetector()
    events = marker_stream(1.0, 12)
    for i, ev in enumerate(events):
        det.feed(ev)
        if det.state is State.MATCHING:
            break
    # confirmed by the closing marker of the 10th repetition
    assert det.state is State.MATCHING
    assert det.model.sequence == (NEXT, STEP)
    assert i == 2 * 10 - 1


def test_multi_marker_sequence_learned():
    seq = (NEXT, NEXT, STEP, STEP)
    det, trig = _run(marker_stream(1.0, 30, sequence=seq))
    assert det.state is State.MATCHING and det.model.sequence == seq and trig == []


def test_stable_stream_has_no_trigger():
    det, trig = _run(marker_stream(1.0, 300))
    assert trig == [] and len(det.model.recent_durations) == 50


def test_slowdown_fires_once_within_window():
    det, trig = _run(marker_stream(1.0, 250, slowdowns=[(100, 1.06)]))
    assert [t.kind for t in trig] == ["Slowdown"]
    onset_ns = 100 * NS
    assert trig[0].at > onset_ns
    assert trig[0].at <= onset_ns + 50 * int(1.06 * NS) + NS


def test_four_percent_is_tolerated():
    _, trig = _run(marker_stream(1.0, 250, slowdowns=[(100, 1.04)]))
    assert trig == []


def test_threshold_is_strict():
    # mean exactly 1.05 x recent_min does not fire
    durations = [1.0] * 20 + [1.05] * 400
    _, trig = _run(marker_stream(durations, len(durations)), window=1)
    assert trig == []


def test_blocked_and_inclusive_gap():
    events = marker_stream(1.0, 80, stall_at=70)
    last = events[-1].ts
    _, trig = _run(events + [Tick(last + 5 * NS - 1)])
    assert trig == []
    # the gap comparison is inclusive, and one stall gives one trigger
    _, trig2 = _run(events + [Tick(last + 5 * NS), Tick(last + 6 * NS)])
    assert [t.kind for t in trig2] == ["Blocked"]
    assert trig2[0].evidence == (5.0 * NS, 1.0 * NS)


def test_blocked_via_tick_period():
    events = marker_stream(1.0, 80, stall_at=70)
    # a late marker after a long gap; probing between markers detects the gap
    events.append(MarkerEvent(STEP, events[-1].ts + 12 * NS))
    det = DegradationDetector()
    trig = det.run(events, tick_every=NS // 2)
    assert [t.kind for t in trig] == ["Blocked"]


def test_no_blocked_between_iterations():
    events = marker_stream(1.0, 80)
    det, trig = _run(events + [Tick(events[-1].ts + 20 * NS)])
    assert trig == []  # the stream stopped on an iteration boundary, nothing is in flight


def test_cooldown_limits_triggers():
    events = marker_stream(1.0, 400, slowdowns=[(100, 1.1), (200, 1.25), (300, 1.5)])
    _, trig = _run(events)
    assert len(trig) == 1
    _, trig = _run(events, cooldown_ns=0)
    assert len(trig) > 1


def test_relearning_after_k_unmatched():
    det = DegradationDetector()
    det.run(marker_stream(1.0, 30))
    assert det.state is State.MATCHING
    t = det.last_ts
    for i in range(199):
        t += NS // 10
        det.feed(MarkerEvent(STEP, t))
    assert det.state is State.MATCHING
    t += NS // 10
    det.feed(MarkerEvent(STEP, t))
    assert det.state is State.LEARNING
    det.run(marker_stream(0.5, 11, sequence=(NEXT, NEXT, STEP), start_ns=t + 1))
    assert det.state is State.MATCHING
    assert det.model.sequence == (NEXT, NEXT, STEP)
    assert det.model.recent_min == NS // 2


def test_out_of_order():
    det = DegradationDetector()
    det.feed(MarkerEvent(NEXT, 10))
    with pytest.raises(OutOfOrderEvent):
        det.feed(MarkerEvent(STEP, 5))


def test_parse_lines():
    text = io.StringIO(
        '{"k":"next","ts":1}\n\n{"t":"tick","ts":5}\n'
        '{"t":"ev","k":"py","n":"optimizer.step","s":9,"e":10}\n'
        '{"t":"hw","ch":"sm","ts":3,"v":0.5}\n')
    assert list(parse_marker_lines(text)) == [MarkerEvent(NEXT, 1), Tick(5), MarkerEvent(STEP, 9)]
    with pytest.raises(MalformedRecord) as ei:
        list(parse_marker_lines(['{"k":"next","ts":1}', '{"k":"jump","ts":2}']))
    assert ei.value.line == 2
    with pytest.raises(MalformedRecord):
        list(parse_marker_lines(["[1]"]))
    assert marker_for_name("dataloader.__next__") is NEXT
    assert marker_for_name("gemm") is None


_durations = st.lists(st.integers(NS // 2, 2 * NS), min_size=1, max_size=150)


@given(_durations)
def test_deterministic_fsm(durations):
    events = marker_stream([d / NS for d in durations], len(durations))
    cfg = DetectorConfig(cooldown_ns=0)
    a, b = DegradationDetector(cfg), DegradationDetector(cfg)
    assert a.run(events) == b.run(events)
    assert a.transitions == b.transitions


@given(_durations)
def test_no_trigger_before_window_or_in_learning(durations):
    events = marker_stream([d / NS for d in durations], len(durations))
    det = DegradationDetector(DetectorConfig(cooldown_ns=0))
    mins = []
    for ev in events:
        state = det.state
        trig = det.feed(ev)
        if trig is not None:
            assert state is State.MATCHING
            assert len(det.model.recent_durations) == det.config.window
        if det.state is State.MATCHING and det.model.recent_min is not None:
            mins.append(det.model.recent_min)
    assert all(a >= b for a, b in zip(mins, mins[1:]))


@given(st.lists(st.booleans(), min_size=200, max_size=240))
def test_any_k_unmatched_suffix_forces_learning(pattern):
    det = DegradationDetector()
    det.run(marker_stream(1.0, 15, sequence=(NEXT, NEXT, STEP)))
    assert det.state is State.MATCHING
    # never two NEXTs in a row, so the learned (NEXT, NEXT, STEP) cannot complete
    noise = [m for p in pattern for m in ((NEXT, STEP) if p else (STEP,))][:200]
    t = det.last_ts
    for i, kind in enumerate(noise):
        assert det.state is State.MATCHING
        t += 1000
        det.feed(MarkerEvent(kind, t))
    assert det.state is State.LEARNING
    det.run(marker_stream(1.0, 11, sequence=(NEXT, STEP, STEP), start_ns=t + 1))
    assert det.state is State.MATCHING and det.model.sequence == (NEXT, STEP, STEP)
