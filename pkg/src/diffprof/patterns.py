"""Runtime behavior patterns: the (beta, mu, sigma) summary of one function on one worker.

beta  -- fraction of the profiling window the function spends on the critical path
mu    -- mean utilization of its governing hardware channel, over the critical
         execution duration of each execution, weighted by that duration
sigma -- the same weighting applied to the per-execution standard deviation
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .critical_path import CriticalSegments, compute_critical_segments, critical_time
from .errors import InputMissing, MalformedRecord
from .trace import Channel, CommScope, FunctionId, Kind, WorkerTrace

MASS_FRACTION = 0.8
ZERO_EPSILON = 0.01
# relative slack on the mass comparison so float summation order cannot flip a verdict
_MASS_RTOL = 1e-9

PATTERN_FORMAT_VERSION = 1


def resource_channel(f: FunctionId) -> Channel | None:
    """Hardware channel that governs ``f``'s performance; None for memory ops."""
    if f.kind is Kind.GPU_KERNEL:
        return Channel.SM_FREQ
    if f.kind is Kind.PYTHON:
        return Channel.CPU
    if f.kind is Kind.COLLECTIVE:
        return Channel.NVLINK if f.comm_scope is CommScope.INTRA else Channel.NIC
    return None


@dataclass(frozen=True)
class CriticalDuration:
    l_c: int
    r_c: int
    g_max: int
    first: int  # index of first sample in the duration (inclusive)
    last: int   # index of last sample (inclusive); -1 when there are no samples

    @property
    def n_samples(self) -> int:
        return self.last - self.first + 1 if self.last >= 0 else 0


def _zero_run_lengths(zero: np.ndarray) -> np.ndarray:
    """run[i] = number of consecutive zeros ending at i (0 where sample i is non-zero)."""
    n = zero.size
    idx = np.arange(n)
    last_nonzero = np.where(zero, -1, idx)
    np.maximum.accumulate(last_nonzero, out=last_nonzero)
    return np.where(zero, idx - last_nonzero, 0)


def _shortest_window(prefix: np.ndarray, target: float, run: np.ndarray, g: int):
    """Shortest (then earliest) [i, j] with mass >= target and no zero run longer than g."""
    n = run.size
    # first index k >= i + g where a zero run of length g+1 ends; window must stop before it
    bad = np.where(run >= g + 1, np.arange(n), n)
    next_bad = np.minimum.accumulate(bad[::-1])[::-1]
    starts = np.arange(n)
    probe = starts + g
    limit = np.where(probe < n, next_bad[np.minimum(probe, n - 1)], n) - 1
    ends = np.searchsorted(prefix, prefix[:-1] + target, side="left") - 1
    ok = (ends < n) & (ends <= limit)
    if not ok.any():
        return None
    lengths = np.where(ok, ends - starts, n + 1)
    i = int(np.argmin(lengths))
    return i, int(ends[i])


def critical_duration(values: Sequence[float] | np.ndarray, l: int = 0, r: int | None = None,
                      timestamps: np.ndarray | None = None,
                      zero_epsilon: float = ZERO_EPSILON,
                      mass_fraction: float = MASS_FRACTION) -> CriticalDuration:
    """Locate the critical execution duration inside one execution [l, r].

    Binary search for the smallest gap tolerance g such that some
    subinterval holds ``mass_fraction`` of the total utilization while never
    containing more than g consecutive near-zero samples. At that g the
    shortest such subinterval wins, earliest on ties. Samples are assumed
    uniformly spaced; ``timestamps`` (if given) map sample indices to time.
    """
    u = np.asarray(values, dtype=np.float64)
    n = u.size
    if r is None:
        r = l + max(n - 1, 0)
    total = float(u.sum()) if n else 0.0
    if n == 0 or total <= 0.0:
        return CriticalDuration(l, r, 0, 0, n - 1)

    prefix = np.concatenate(([0.0], np.cumsum(u)))
    target = mass_fraction * total * (1.0 - _MASS_RTOL)
    run = _zero_run_lengths(u <= zero_epsilon)

    best = _shortest_window(prefix, target, run, 0)
    g_best = 0
    if best is None:
        lo, hi = 1, n
        while lo <= hi:
            g = (lo + hi) // 2
            found = _shortest_window(prefix, target, run, g)
            if found is not None:
                best, g_best = found, g
                hi = g - 1
            else:
                lo = g + 1
    i, j = best
    if timestamps is not None:
        l_c, r_c = int(timestamps[i]), int(timestamps[j])
    elif n > 1:
        step = (r - l) / (n - 1)
        l_c, r_c = l + int(round(i * step)), l + int(round(j * step))
    else:
        l_c, r_c = l, r
    return CriticalDuration(l_c, r_c, g_best, i, j)


@dataclass(frozen=True)
class BehaviorPattern:
    beta: float
    mu: float
    sigma: float
    exec_count: int = 0
    channel: Channel | None = None

    def vector(self) -> tuple[float, float, float]:
        return (self.beta, self.mu, self.sigma)


@dataclass(frozen=True)
class PatternRecord:
    worker: int
    function: FunctionId
    pattern: BehaviorPattern


def _q(x: float) -> float:
    """Quantize to the 9 significant digits used on disk, so files round-trip exactly."""
    return float(f"{x:.9g}")


def summarize(trace: WorkerTrace, segments: CriticalSegments | None = None, *,
              zero_epsilon: float = ZERO_EPSILON) -> list[PatternRecord]:
    """Behavior pattern of every function executed on this worker.

    Python functions that never ran on the training thread are left out.
    """
    if segments is None:
        segments = compute_critical_segments(trace)
    window = trace.window_length
    by_function: dict[FunctionId, list] = {}
    for ev in trace.events:
        if ev.function.kind is Kind.PYTHON and not ev.is_training_thread:
            continue
        by_function.setdefault(ev.function, []).append(ev)

    series_cache = {}
    records = []
    for f in sorted(by_function, key=lambda fn: fn.key):
        events = by_function[f]
        beta = critical_time(segments, f) / window
        channel = resource_channel(f)
        mu = sigma = 0.0
        if channel is not None:
            if channel not in series_cache:
                series_cache[channel] = trace.series(channel)
            series = series_cache[channel]
            if series is not None and len(series):
                mu, sigma = _weighted_utilization(series, events, zero_epsilon)
        records.append(PatternRecord(
            trace.worker, f,
            BehaviorPattern(_q(min(beta, 1.0)), _q(mu), _q(sigma), len(events), channel)))
    return records


def _weighted_utilization(series, events, zero_epsilon: float) -> tuple[float, float]:
    ts, vals = series.timestamps, series.values
    starts = np.fromiter((e.start for e in events), dtype=np.int64, count=len(events))
    ends = np.fromiter((e.end for e in events), dtype=np.int64, count=len(events))
    lo = np.searchsorted(ts, starts, side="left")
    hi = np.searchsorted(ts, ends, side="right")
    weight = 0
    mass = 0.0
    spread = 0.0
    for a, b in zip(lo.tolist(), hi.tolist()):
        if b <= a:
            continue
        u = vals[a:b]
        if b - a > 1 and float(u.sum()) > 0.0:
            cd = critical_duration(u, zero_epsilon=zero_epsilon)
            u = u[cd.first:cd.last + 1]
        k = u.size
        weight += k
        mass += float(u.sum())
        spread += k * float(u.std())
    if weight == 0:
        return 0.0, 0.0
    return mass / weight, spread / weight


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def pattern_line(rec: PatternRecord) -> str:
    p = rec.pattern
    f = json.dumps(rec.function.to_wire(), separators=(",", ":"))
    ch = json.dumps(p.channel.value if p.channel is not None else None)
    return (f'{{"f":{f},"b":{_fmt(p.beta)},"m":{_fmt(p.mu)},"s":{_fmt(p.sigma)},'
            f'"n":{p.exec_count},"ch":{ch}}}')


def write_patterns(records: Sequence[PatternRecord], path: str | Path, *,
                   worker: int | None = None, window_ns: int | None = None,
                   config: dict | None = None) -> int:
    """Write one worker's patterns; the first line is a header. Returns bytes written."""
    ranks = {r.worker for r in records}
    if len(ranks) > 1:
        raise ValueError(f"records span several workers: {sorted(ranks)}")
    if worker is None:
        worker = ranks.pop() if ranks else None
    header = {"t": "patterns", "v": PATTERN_FORMAT_VERSION, "rank": worker}
    if window_ns is not None:
        header["window_ns"] = window_ns
    if config:
        header["config"] = config
    lines = [json.dumps(header, separators=(",", ":"), sort_keys=True)]
    lines.extend(pattern_line(r) for r in records)
    data = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(data)
    return len(data)


def read_patterns(path: str | Path) -> tuple[dict, list[PatternRecord]]:
    path = Path(path)
    if not path.exists():
        raise InputMissing(f"{path}: no such pattern file")
    header = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                if header is None:
                    if rec.get("t") != "patterns":
                        raise MalformedRecord("missing pattern header", lineno, str(path))
                    header = rec
                    continue
                ch = rec.get("ch")
                pat = BehaviorPattern(float(rec["b"]), float(rec["m"]), float(rec["s"]),
                                      int(rec["n"]), Channel(ch) if ch is not None else None)
                records.append(PatternRecord(header["rank"], FunctionId.from_wire(rec["f"]), pat))
            except MalformedRecord:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(f"bad pattern record ({exc})", lineno, str(path)) from None
    if header is None:
        raise MalformedRecord("empty pattern file", None, str(path))
    return header, records


def patterns_path(directory: str | Path, rank: int) -> Path:
    return Path(directory) / f"worker_{rank}.patterns"


def summarize_many(traces: Iterable[WorkerTrace], **kw) -> list[PatternRecord]:
    out = []
    for tr in traces:
        out.extend(summarize(tr, **kw))
    return out
