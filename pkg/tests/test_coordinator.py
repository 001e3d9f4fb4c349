from __future__ import annotations

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from diffprof.coordinator import (
    Coordinator,
    DaemonState,
    Phase,
    PlanServer,
    ProfilingPlan,
    daemon_poll,
    plan_profiling,
    poll_plan,
    simulate_protocol,
)
from diffprof.errors import CoordinatorTimeout, MissedWindow, NonPositiveIterationTime


def test_plan_arithmetic():
    assert plan_profiling(100, 0.5) == ProfilingPlan(103, 143, 20.0, 3)
    assert plan_profiling(7, 30.0).stop_iteration == 11  # at least one iteration
    assert plan_profiling(0, 0.3, 20.0, lead=5).stop_iteration == 5 + 67
    with pytest.raises(NonPositiveIterationTime):
        plan_profiling(1, 0.0)


def test_plan_wire_round_trip():
    plan = ProfilingPlan(3, 9, 2.5)
    assert ProfilingPlan.from_wire(plan.to_wire()) == plan


def test_daemon_lifecycle():
    plan = ProfilingPlan(5, 8)
    st_ = DaemonState(1, current_iteration=2)
    st_ = daemon_poll(st_, None)
    assert st_.phase is Phase.IDLE
    phases = []
    for it in range(2, 12):
        st_ = daemon_poll(DaemonState(1, it, st_.phase, st_.plan), plan)
        phases.append((it, st_.phase))
    assert phases[:6] == [(2, Phase.ARMED), (3, Phase.ARMED), (4, Phase.ARMED),
                          (5, Phase.PROFILING), (6, Phase.PROFILING), (7, Phase.PROFILING)]
    assert phases[6] == (8, Phase.UPLOADING)
    assert phases[7] == (9, Phase.DONE)
    assert phases[8] == (10, Phase.IDLE) and phases[9] == (11, Phase.IDLE)  # not re-armed


def test_late_plan_is_missed():
    with pytest.raises(MissedWindow) as ei:
        daemon_poll(DaemonState(4, current_iteration=5), ProfilingPlan(5, 8))
    assert (ei.value.rank, ei.value.current_iteration, ei.value.start_iteration) == (4, 5, 5)


def test_coordinator_timeout():
    c = Coordinator(window_seconds=2.0)
    c.report(10, 0.0)
    c.on_trigger(0.5, 1.0)
    c.check(10.9)
    with pytest.raises(CoordinatorTimeout):
        c.check(11.0)


def test_protocol_agreement_default():
    for seed in range(10):
        out = simulate_protocol(64, seed)
        assert out.agreed, seed
        assert not out.missed and not out.unfinished
        assert set(out.ranges.values()) == {(out.plan.start_iteration, out.plan.stop_iteration)}


@given(st.integers(1, 40), st.integers(0, 2**31), st.integers(2, 6),
       st.floats(0.05, 3.0), st.floats(0.3, 1.0))
def test_agreement_property(n, seed, lead, iteration_s, max_offset):
    # rank 0's report can be 1.5 iterations stale and publishing takes 0.05; a poll
    # must still land before the start iteration
    assume(1.5 + 0.05 + max_offset < lead)
    out = simulate_protocol(n, seed, iteration_seconds=iteration_s, lead=lead,
                            window_seconds=5.0, max_poll_offset=max_offset)
    assert out.agreed
    assert len(out.ranges) == n


def test_safety_under_slow_polling():
    # polls rarer than the lead: late observers report MissedWindow and never profile
    missed = 0
    for seed in range(20):
        out = simulate_protocol(32, seed, lead=1, max_poll_offset=4.0, worker_skew=0.0)
        start, stop = out.plan.start_iteration, out.plan.stop_iteration
        missed += len(out.missed)
        for w, (a, b) in out.ranges.items():
            assert w not in out.missed
            assert start <= a and b <= stop
        assert not out.unfinished
    assert missed > 0


def test_loopback_exchange():
    server = PlanServer()
    server.serve_in_background()
    try:
        st_ = DaemonState(3, 10)
        assert poll_plan(server.address, st_) is None
        plan = ProfilingPlan(13, 20, 20.0)
        server.publish(plan)
        assert poll_plan(server.address, st_) == plan
        assert server.acks[-1] == {"rank": 3, "phase": "Idle", "iter": 10}
    finally:
        server.shutdown()
        server.server_close()
