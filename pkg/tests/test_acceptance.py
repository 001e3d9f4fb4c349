"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest -s tests/test_acceptance.py`` to see one PASS/FAIL line per
criterion.  Ground truth for the simulated scenarios comes from the fault
injector, never from the code under test.
"""
from __future__ import annotations

import contextlib
import os
import resource
import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import critical_duration_oracle, critical_segments_oracle, random_trace

from diffprof.cli import run_e2e
from diffprof.config import ToolkitConfig
from diffprof.coordinator import simulate_protocol
from diffprof.critical_path import compute_critical_segments
from diffprof.detector import DegradationDetector, MarkerEvent, Marker, State, Tick
from diffprof.localize import ExpectedRange, PatternTable, Reason, localize, localize_function
from diffprof.patterns import critical_duration, summarize, write_patterns
from diffprof.simulator import (
    DEFAULT_TEMPLATE,
    NS,
    ClusterSpec,
    FaultKind,
    FaultSpec,
    Scenario,
    marker_stream,
    simulate,
)
from diffprof.trace import Channel, CommScope, FunctionId, Kind, write_worker_trace

RING = "ncclAllReduce_RING"


@contextlib.contextmanager
def criterion(n: int, label: str):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        print(f"\nFAIL criterion {n} ({label}): {type(exc).__name__}: {exc}")
        raise
    print(f"\nPASS criterion {n} ({label}) in {time.perf_counter() - t0:.1f}s")


def _e2e(cluster, faults, seed, window=4.0, pre=60, post=60):
    sc = Scenario(replace(cluster, window_seconds=window), list(faults), seed)
    cfg = replace(ToolkitConfig(), window_seconds=window, rng_seed=seed)
    return run_e2e(sc, cfg, pre, post)


def _flagged(doc, pred):
    return sorted({f["rank"] for f in doc["findings"] if pred(f)})


def test_criterion_1_ring_signature():
    with criterion(1, "ring-fault differential signature"):
        t0 = time.perf_counter()
        spec = ClusterSpec(workers=32, hosts=4, rings=4, window_seconds=20.0)
        res = simulate(spec, [FaultSpec(FaultKind.SLOW_NIC_BOND, {"host": 1, "bond": 2}, 0.5)], 0)
        records = [r for tr in res.traces for r in summarize(tr)]
        report = localize(records)
        elapsed = time.perf_counter() - t0

        truth = res.truth
        ring = {r.worker: r.pattern for r in records if r.function.name == RING}
        slow, in_ring, out = truth["slow_link"], truth["in_ring"], truth["out_of_ring"]
        assert slow and in_ring and out
        assert min(ring[w].mu for w in out) > max(ring[w].mu for w in in_ring)
        assert 2 * max(ring[w].sigma for w in slow) < min(ring[w].sigma for w in in_ring)
        flags = {(v.worker, v.function.name): v.reason for v in report.findings()}
        for w in slow:
            assert flags.get((w, RING)) in (Reason.PEER_OUTLIER, Reason.BOTH), w
        assert not {w for w, _ in flags} & set(out)
        assert elapsed <= 30.0, elapsed


def test_criterion_2_algorithm_oracle():
    with criterion(2, "critical-duration oracle equivalence"):
        rng = np.random.default_rng(2024)
        levels = np.array([0.0, 0.25, 0.5, 1.0])
        t0 = time.perf_counter()
        mismatches = 0
        for _ in range(1000):
            u = levels[rng.integers(0, 4, rng.integers(1, 65))]
            got = critical_duration(u)
            g, i, j = critical_duration_oracle(u)
            mismatches += (got.g_max, got.l_c, got.r_c) != (g, i, j)
        assert mismatches == 0
        assert time.perf_counter() - t0 <= 5.0


def test_criterion_3_critical_path_oracle():
    with criterion(3, "critical-path oracle equivalence"):
        rng = np.random.default_rng(77)
        t0 = time.perf_counter()
        for _ in range(200):
            trace = random_trace(rng, max_events=100)
            assert compute_critical_segments(trace).segments == critical_segments_oracle(trace)
        assert time.perf_counter() - t0 <= 10.0


def test_criterion_4_pattern_compression(tmp_path):
    with criterion(4, "pattern compression"):
        tpl = [dict(p) for p in DEFAULT_TEMPLATE]
        tpl[2]["count"], tpl[3]["count"] = 400, 800
        spec = ClusterSpec(workers=1, hosts=1, gpus_per_host=1, rings=1,
                           iteration_template=tpl, window_seconds=20.0)
        trace = simulate(spec, [], 0).traces[0]
        assert len(trace.events) >= 100_000
        trace_bytes = write_worker_trace(trace, tmp_path / "w.trace")
        write_patterns(summarize(trace), tmp_path / "w.patterns", worker=0,
                       window_ns=trace.window_length)
        pattern_bytes = (tmp_path / "w.patterns").stat().st_size
        assert pattern_bytes <= 1e-3 * trace_bytes, (pattern_bytes, trace_bytes)


def _synthetic_table(workers, functions, seed=0):
    rng = np.random.default_rng(seed)
    table = PatternTable(range(workers))
    for j in range(functions):
        if j % 2:
            f = FunctionId(Kind.GPU_KERNEL, f"kernel_{j}")
        else:
            f = FunctionId(Kind.COLLECTIVE, f"coll_{j}", (), CommScope.INTER)
        x = np.column_stack([rng.uniform(0.05, 0.3, workers), rng.uniform(0.4, 0.6, workers),
                             rng.uniform(0.0, 0.1, workers)])
        table.set_function(f, x)
    return table


@pytest.mark.parametrize("workers, budget", [
    (100_000, 60.0),
    pytest.param(1_000_000, 300.0, marks=pytest.mark.skipif(
        not os.environ.get("DIFFPROF_LARGE"), reason="set DIFFPROF_LARGE=1 for the 1M-worker run")),
])
def test_criterion_5_localize_scalability(workers, budget):
    with criterion(5, f"localization at {workers} workers"):
        table = _synthetic_table(workers, 20)
        t0 = time.perf_counter()
        report = localize(table)
        elapsed = time.perf_counter() - t0
        assert report.worker_count == workers
        assert elapsed <= budget, elapsed
        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
        assert peak < 4 * 2**30, peak


def test_criterion_6_detector_constants():
    with criterion(6, "degradation detector constants"):
        trig = DegradationDetector().run(marker_stream(1.0, 300, slowdowns=[(100, 1.06)]))
        assert [t.kind for t in trig] == ["Slowdown"]
        # fired inside the first 50 slow iterations
        assert 100 * NS < trig[0].at <= 100 * NS + 50 * int(1.06 * NS)
        assert DegradationDetector().run(marker_stream(1.0, 300, slowdowns=[(100, 1.04)])) == []

        events = marker_stream(1.0, 80, stall_at=70)
        trig = DegradationDetector().run(events + [Tick(events[-1].ts + 5 * NS),
                                                   Tick(events[-1].ts + 9 * NS)])
        assert [t.kind for t in trig] == ["Blocked"]

        det = DegradationDetector()
        det.run(marker_stream(1.0, 20))
        assert det.state is State.MATCHING
        t = det.last_ts
        for _ in range(200):
            t += NS // 10
            det.feed(MarkerEvent(Marker.STEP, t))
        assert det.state is State.LEARNING
        new = (Marker.NEXT, Marker.NEXT, Marker.STEP)
        stream = marker_stream(1.0, 11, sequence=new, start_ns=t + 1)
        det.run(stream[:29])
        assert det.state is State.LEARNING  # one marker short of ten repetitions
        det.run(stream[29:30])
        assert det.state is State.MATCHING and det.model.sequence == new


def test_criterion_7_coordinator_agreement():
    with criterion(7, "coordinator agreement"):
        missed = 0
        for seed in range(100):
            out = simulate_protocol(64, seed, lead=3, max_poll_offset=1.0)
            assert out.agreed, seed
            assert len(set(out.ranges.values())) == 1 and len(out.ranges) == 64
            missed += len(out.missed)
        assert missed == 0


def test_criterion_8_mad_fixtures():
    with criterion(8, "MAD criterion fixtures"):
        f = FunctionId(Kind.GPU_KERNEL, "gemm")
        rng = np.random.default_rng(8)
        base = np.array([0.3, 0.9, 0.02])
        x = base * rng.uniform(0.995, 1.005, (100, 3))
        x[37] = (0.3, 0.45, 0.02)
        fr = localize_function(f, np.arange(100), x, ExpectedRange(), channel=Channel.SM_FREQ)
        # the outlier really is at least delta away from every peer once normalized
        norm = x / x.max(axis=0)
        assert np.all(np.delete(np.abs(norm - norm[37]).sum(axis=1), 37) >= 0.4)
        assert np.flatnonzero(fr.abnormal).tolist() == [37]

        same = np.tile(base, (100, 1))
        fr = localize_function(f, np.arange(100), same, ExpectedRange(), channel=Channel.SM_FREQ)
        assert not fr.abnormal.any()

        gated = x.copy()
        gated[37, 0] = 0.009
        fr = localize_function(f, np.arange(100), gated, ExpectedRange(), channel=Channel.SM_FREQ)
        assert not fr.abnormal.any()


def test_criterion_9_null_e2e():
    with criterion(9, "end-to-end null test, 128 workers x 20 seeds"):
        cluster = ClusterSpec(workers=128, hosts=16)
        for seed in range(20):
            doc = _e2e(cluster, [], seed, window=2.0)
            assert doc["findings"] == [], (seed, doc["findings"][:3])
            assert doc["extra"]["protocol_agreed"]


def test_criterion_10_gpu_throttle():
    with criterion(10, "GpuThrottle signature"):
        cluster = ClusterSpec(workers=64, hosts=8)
        fault = FaultSpec(FaultKind.GPU_THROTTLE, {"hosts": [1, 2]}, 0.6)
        for seed in (0, 1):
            doc = _e2e(cluster, [fault], seed)
            targets = doc["extra"]["ground_truth"]["targets"]["GpuThrottle"]
            assert doc["extra"]["trigger"]["kind"] == "Slowdown"
            gpu = [f for f in doc["findings"] if f["function"]["kind"] == "gpu"]
            assert _flagged(doc, lambda f: f["function"]["kind"] == "gpu") == targets
            for f in gpu:
                d = doc["distributions"][_key(f)]
                # busier on the critical path, lower SM frequency than peers
                assert f["beta"] > d["beta"]["median"]
                assert f["mu"] < d["mu"]["median"]


def test_criterion_10_nvlink_down():
    with criterion(10, "NvlinkDown signature"):
        fault = FaultSpec(FaultKind.NVLINK_DOWN, {"worker": 9}, 0.5)
        for seed in (0, 1):
            doc = _e2e(ClusterSpec(), [fault], seed)
            target = doc["extra"]["ground_truth"]["targets"]["NvlinkDown"]
            assert target == [9]
            hits = [f for f in doc["findings"] if f["rank"] == 9 and f["function"]["name"] == RING]
            assert hits and hits[0]["reason"] in ("PeerOutlier", "Both")
            d = doc["distributions"][_key(hits[0])]
            # rerouted traffic drives the GPU-NIC channel above every peer
            assert hits[0]["mu"] == d["mu"]["max"] > 1.5 * d["mu"]["median"]
            # and the worker sits among the comm-heavy population, far above the gate
            assert hits[0]["beta"] >= 10 * doc["config"]["beta_gate"]
            assert d["beta"]["p05"] >= 10 * doc["config"]["beta_gate"]


def test_criterion_10_async_gc():
    with criterion(10, "AsyncGc signature"):
        fault = FaultSpec(FaultKind.ASYNC_GC, {}, 0.2, probability=0.02)
        seen = []
        for seed in (0, 1, 2):
            doc = _e2e(ClusterSpec(), [fault], seed)
            paused = [i for i, n in enumerate(doc["extra"]["ground_truth"]["gc_pauses"]) if n]
            py = [f for f in doc["findings"] if f["function"]["kind"] == "py"]
            assert py and all(f["reason"] in ("OutOfExpectedRange", "Both") for f in py)
            flagged = _flagged(doc, lambda f: f["function"]["kind"] == "py")
            assert flagged == paused
            assert 0 < len(flagged) < doc["workers"] / 2
            seen.append(tuple(flagged))
        assert len(set(seen)) > 1  # a different minority each run


def test_criterion_10_load_imbalance():
    with criterion(10, "LoadImbalance signature"):
        fault = FaultSpec(FaultKind.LOAD_IMBALANCE, {}, 0.1)
        for seed in (0, 1):
            doc = _e2e(ClusterSpec(), [fault], seed)
            d = doc["distributions"][f"comm:inter {RING}"]
            mu, beta = d["mu"], d["beta"]
            assert (mu["max"] - mu["min"]) / mu["median"] < 0.02
            assert beta["max"] / beta["min"] > 1.5
            assert (beta["p95"] - beta["p05"]) / beta["median"] > 0.3


def _key(finding):
    fn = finding["function"]
    scope = f":{fn['scope']}" if fn.get("scope") else ""
    stack = f" [{' > '.join(fn['stack'])}]" if fn["stack"] else ""
    return f"{fn['kind']}{scope} {fn['name']}{stack}"
