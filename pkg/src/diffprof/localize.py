"""Localize abnormal (function, worker) pairs from aggregated behavior patterns.

Two distances are computed per pair: how far the pattern sits outside the
expected box for its function class, and how many sampled peers have a
clearly different (max-normalized) pattern. A pair is abnormal when it
contributes more than ``beta_gate`` of the window and either distance fires;
the peer distance fires above median + k * MAD over all workers.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptySession
from .patterns import BehaviorPattern, PatternRecord, read_patterns
from .trace import Channel, CommScope, FunctionId, Kind

DEFAULT_DELTA = 0.4
DEFAULT_K = 5.0
DEFAULT_BETA_GATE = 0.01
DEFAULT_MAX_PEERS = 100

_CHUNK = 8192


@dataclass(frozen=True)
class ExpectedRange:
    beta: tuple[float, float] = (0.0, 1.0)
    mu: tuple[float, float] = (0.0, 1.0)
    sigma: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        for name in ("beta", "mu", "sigma"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name} range [{lo}, {hi}] is not a sub-interval of [0, 1]")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.beta[0], self.mu[0], self.sigma[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.beta[1], self.mu[1], self.sigma[1]])

    def contains(self, p: Sequence[float]) -> bool:
        return bool(np.all((self.lower <= p) & (np.asarray(p) <= self.upper)))

    def to_list(self) -> list:
        return [list(self.beta), list(self.mu), list(self.sigma)]


_KIND_ALIASES = {
    "PythonFunction": Kind.PYTHON, "CollectiveComm": Kind.COLLECTIVE,
    "GpuComputeKernel": Kind.GPU_KERNEL, "MemoryOp": Kind.MEMORY_OP,
}


def _parse_policy_key(key: str):
    kind_s, _, scope_s = key.partition(":")
    kind = _KIND_ALIASES.get(kind_s) or Kind(kind_s)
    return (kind, CommScope(scope_s)) if scope_s else kind


@dataclass
class RangePolicy:
    """Expected box per function kind, optionally refined per collective scope."""

    ranges: dict = field(default_factory=lambda: {
        Kind.PYTHON: ExpectedRange(beta=(0.0, 0.01)),
        Kind.COLLECTIVE: ExpectedRange(beta=(0.0, 0.3)),
        Kind.GPU_KERNEL: ExpectedRange(),
        Kind.MEMORY_OP: ExpectedRange(),
    })

    def for_function(self, f: FunctionId) -> ExpectedRange:
        if f.comm_scope is not None and (f.kind, f.comm_scope) in self.ranges:
            return self.ranges[(f.kind, f.comm_scope)]
        return self.ranges[f.kind]

    @classmethod
    def with_overrides(cls, overrides: Mapping[str, Sequence] | None) -> RangePolicy:
        """``overrides`` maps "py", "comm", "comm:inter", "PythonFunction", ... to a
        [[b_lo, b_hi], [m_lo, m_hi], [s_lo, s_hi]] box."""
        policy = cls()
        for key, box in (overrides or {}).items():
            policy.ranges[_parse_policy_key(key)] = ExpectedRange(*(tuple(b) for b in box))
        return policy

    def to_dict(self) -> dict:
        out = {}
        for key, box in self.ranges.items():
            name = f"{key[0].value}:{key[1].value}" if isinstance(key, tuple) else key.value
            out[name] = box.to_list()
        return dict(sorted(out.items()))


def distance_from_expectation(p: Sequence[float], r: ExpectedRange) -> float:
    """Minimal Manhattan distance from ``p`` to the box ``r``: per-axis overshoot, summed."""
    return float(distances_from_expectation(np.asarray(p, dtype=float)[None, :], r)[0])


def distances_from_expectation(vectors: np.ndarray, r: ExpectedRange) -> np.ndarray:
    below = np.clip(r.lower - vectors, 0.0, None)
    above = np.clip(vectors - r.upper, 0.0, None)
    return (below + above).sum(axis=1)


def max_normalize(vectors: np.ndarray) -> np.ndarray:
    """Divide each column by its max over workers; an all-zero column stays zero."""
    vectors = np.asarray(vectors, dtype=np.float64)
    top = vectors.max(axis=0)
    safe = np.where(top > 0.0, top, 1.0)
    return np.where(top > 0.0, vectors / safe, 0.0)


def differential_distances(normalized: np.ndarray, delta: float = DEFAULT_DELTA,
                           n_peers: int | None = None,
                           rng: np.random.Generator | int | None = 0) -> np.ndarray:
    """Fraction of sampled peers whose normalized pattern is at least ``delta`` away.

    One peer subset of size ``n_peers`` (default min(100, W)) is drawn without
    replacement and shared by all workers; it may contain the worker itself.
    """
    normalized = np.asarray(normalized, dtype=np.float64)
    w = normalized.shape[0]
    n = min(DEFAULT_MAX_PEERS, w) if n_peers is None else min(int(n_peers), w)
    if w == 0 or n == 0:
        return np.zeros(w)
    if n == w:
        peers = normalized
    else:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        peers = normalized[np.sort(rng.choice(w, size=n, replace=False))]
    out = np.empty(w)
    for lo in range(0, w, _CHUNK):
        block = normalized[lo:lo + _CHUNK]
        dist = np.abs(block[:, None, :] - peers[None, :, :]).sum(axis=2)
        out[lo:lo + _CHUNK] = np.count_nonzero(dist >= delta, axis=1) / n
    return out


def differential_distance(normalized: np.ndarray, index: int, delta: float = DEFAULT_DELTA,
                          n_peers: int | None = None,
                          rng: np.random.Generator | int | None = 0) -> float:
    return float(differential_distances(normalized, delta, n_peers, rng)[index])


def mad_threshold(deltas: Sequence[float], k: float = DEFAULT_K, mad_floor: float = 0.0) -> float:
    """median + k * MAD. ``mad_floor`` (off by default) guards the MAD = 0 case."""
    d = np.asarray(deltas, dtype=np.float64)
    med = float(np.median(d))
    mad = float(np.median(np.abs(d - med)))
    return med + k * max(mad, mad_floor)


class Reason(str, Enum):
    OUT_OF_RANGE = "OutOfExpectedRange"
    PEER_OUTLIER = "PeerOutlier"
    BOTH = "Both"


@dataclass(frozen=True)
class LocalizeConfig:
    delta: float = DEFAULT_DELTA
    k: float = DEFAULT_K
    beta_gate: float = DEFAULT_BETA_GATE
    max_peers: int = DEFAULT_MAX_PEERS
    seed: int = 0
    mad_floor: float = 0.0


@dataclass(frozen=True)
class AnomalyVerdict:
    worker: int
    function: FunctionId
    D: float
    Delta: float
    abnormal: bool
    reason: Reason | None
    pattern: BehaviorPattern
    normalized_pattern: tuple[float, float, float]

    @property
    def score(self) -> float:
        return self.D + self.Delta


class PatternTable:
    """Dense (workers x functions) pattern storage.

    Workers without a record for a function hold the zero pattern.
    """

    def __init__(self, ranks: Sequence[int]):
        self.ranks = np.asarray(sorted(set(int(r) for r in ranks)), dtype=np.int64)
        self._pos = {int(r): i for i, r in enumerate(self.ranks.tolist())}
        self.values: dict[FunctionId, np.ndarray] = {}
        self.present: dict[FunctionId, np.ndarray] = {}
        self.exec_count: dict[FunctionId, np.ndarray] = {}
        self.channel: dict[FunctionId, Channel | None] = {}

    def __len__(self):
        return int(self.ranks.size)

    @property
    def functions(self) -> list[FunctionId]:
        return sorted(self.values, key=lambda f: f.key)

    def _ensure(self, f: FunctionId, channel):
        if f not in self.values:
            w = len(self)
            self.values[f] = np.zeros((w, 3))
            self.present[f] = np.zeros(w, dtype=bool)
            self.exec_count[f] = np.zeros(w, dtype=np.int64)
            self.channel[f] = channel

    def add(self, rec: PatternRecord):
        p = rec.pattern
        self._ensure(rec.function, p.channel)
        i = self._pos[rec.worker]
        self.values[rec.function][i] = (p.beta, p.mu, p.sigma)
        self.present[rec.function][i] = True
        self.exec_count[rec.function][i] = p.exec_count

    def set_function(self, f: FunctionId, values: np.ndarray, present: np.ndarray | None = None,
                     exec_count: np.ndarray | None = None, channel: Channel | None = None):
        """Bulk-load one function's column (rows aligned with ``ranks``)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(self), 3):
            raise ValueError(f"expected shape {(len(self), 3)}, got {values.shape}")
        self.values[f] = values
        self.present[f] = (np.ones(len(self), dtype=bool) if present is None
                           else np.asarray(present, dtype=bool))
        self.exec_count[f] = (np.zeros(len(self), dtype=np.int64) if exec_count is None
                              else np.asarray(exec_count, dtype=np.int64))
        self.channel[f] = channel

    @classmethod
    def from_records(cls, records: Iterable[PatternRecord],
                     ranks: Iterable[int] | None = None) -> PatternTable:
        records = list(records)
        all_ranks = {r.worker for r in records}
        if ranks is not None:
            all_ranks |= set(ranks)
        table = cls(all_ranks)
        for rec in records:
            table.add(rec)
        return table

    @classmethod
    def from_directory(cls, directory: str | Path) -> PatternTable:
        """Stream ``worker_<rank>.patterns`` files; one file is held in memory at a time."""
        files = sorted(Path(directory).glob("worker_*.patterns"))
        headers = []
        for p in files:
            with open(p, encoding="utf-8") as fh:
                first = fh.readline()
            headers.append(json.loads(first)["rank"] if first.strip() else None)
        table = cls([h for h in headers if h is not None])
        for p in files:
            _, recs = read_patterns(p)
            for rec in recs:
                table.add(rec)
        return table


@dataclass
class FunctionResult:
    function: FunctionId
    channel: Channel | None
    ranks: np.ndarray
    patterns: np.ndarray
    present: np.ndarray
    exec_count: np.ndarray
    normalized: np.ndarray
    D: np.ndarray
    Delta: np.ndarray
    median: float
    mad: float
    threshold: float
    gated: np.ndarray
    out_of_range: np.ndarray
    peer_outlier: np.ndarray
    expected: ExpectedRange

    @property
    def abnormal(self) -> np.ndarray:
        return self.gated & (self.out_of_range | self.peer_outlier)

    def reason_at(self, i: int) -> Reason | None:
        if not self.abnormal[i]:
            return None
        if self.out_of_range[i] and self.peer_outlier[i]:
            return Reason.BOTH
        return Reason.OUT_OF_RANGE if self.out_of_range[i] else Reason.PEER_OUTLIER

    def verdict(self, i: int) -> AnomalyVerdict:
        b, m, s = self.patterns[i].tolist()
        return AnomalyVerdict(
            int(self.ranks[i]), self.function, float(self.D[i]), float(self.Delta[i]),
            bool(self.abnormal[i]), self.reason_at(i),
            BehaviorPattern(b, m, s, int(self.exec_count[i]), self.channel),
            tuple(self.normalized[i].tolist()))

    def distribution(self) -> dict:
        """Per-component spread over the workers that executed the function."""
        vals = self.patterns[self.present]
        out = {"workers": int(self.present.sum()), "gated": int(self.gated.sum()),
               "abnormal": int(self.abnormal.sum()), "delta_median": self.median,
               "delta_mad": self.mad, "delta_threshold": self.threshold}
        for j, name in enumerate(("beta", "mu", "sigma")):
            col = vals[:, j] if vals.size else np.zeros(1)
            q = np.quantile(col, [0.0, 0.05, 0.5, 0.95, 1.0])
            out[name] = dict(zip(("min", "p05", "median", "p95", "max"),
                                 (round(float(x), 9) for x in q)))
        return out


@dataclass
class AnomalyReport:
    results: list[FunctionResult]
    worker_count: int
    config: LocalizeConfig

    def _entries(self, abnormal_only: bool):
        for fr in self.results:
            mask = fr.abnormal if abnormal_only else fr.gated
            for i in np.flatnonzero(mask).tolist():
                yield fr, i

    def verdicts(self, abnormal_only: bool = False) -> list[AnomalyVerdict]:
        """Ranked verdicts: abnormal first, then by D + Delta descending."""
        out = [fr.verdict(i) for fr, i in self._entries(abnormal_only)]
        out.sort(key=lambda v: (not v.abnormal, -v.score, v.function.key, v.worker))
        return out

    def findings(self) -> list[AnomalyVerdict]:
        return self.verdicts(abnormal_only=True)

    def abnormal_pairs(self) -> set[tuple[int, FunctionId]]:
        return {(int(fr.ranks[i]), fr.function) for fr, i in self._entries(True)}

    def result(self, f: FunctionId) -> FunctionResult | None:
        for fr in self.results:
            if fr.function == f:
                return fr
        return None


def _function_seed(seed: int, f: FunctionId) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(f.key.encode("utf-8"))])


def localize_function(f: FunctionId, ranks: np.ndarray, patterns: np.ndarray,
                      expected: ExpectedRange, config: LocalizeConfig = LocalizeConfig(),
                      present: np.ndarray | None = None, exec_count: np.ndarray | None = None,
                      channel: Channel | None = None) -> FunctionResult:
    patterns = np.asarray(patterns, dtype=np.float64)
    w = patterns.shape[0]
    normalized = max_normalize(patterns)
    deltas = differential_distances(normalized, config.delta, config.max_peers,
                                    _function_seed(config.seed, f))
    med = float(np.median(deltas))
    mad = float(np.median(np.abs(deltas - med)))
    threshold = med + config.k * max(mad, config.mad_floor)
    D = distances_from_expectation(patterns, expected)
    return FunctionResult(
        function=f, channel=channel, ranks=np.asarray(ranks), patterns=patterns,
        present=np.ones(w, dtype=bool) if present is None else present,
        exec_count=np.zeros(w, dtype=np.int64) if exec_count is None else exec_count,
        normalized=normalized, D=D, Delta=deltas, median=med, mad=mad, threshold=threshold,
        gated=patterns[:, 0] > config.beta_gate, out_of_range=D > 0.0,
        peer_outlier=deltas > threshold, expected=expected)


def localize(records: Iterable[PatternRecord] | PatternTable, policy: RangePolicy | None = None,
             config: LocalizeConfig | None = None, jobs: int = 1) -> AnomalyReport:
    """Score every (function, worker) pair and flag the abnormal ones.

    Functions are independent; ``jobs`` > 1 spreads them over a thread pool.
    The result does not depend on ``jobs``.
    """
    policy = policy or RangePolicy()
    config = config or LocalizeConfig()
    table = records if isinstance(records, PatternTable) else PatternTable.from_records(records)
    if len(table) == 0:
        raise EmptySession("no pattern records to localize")

    def one(f: FunctionId) -> FunctionResult:
        return localize_function(f, table.ranks, table.values[f], policy.for_function(f), config,
                                 table.present[f], table.exec_count[f], table.channel[f])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, table.functions))
    else:
        results = [one(f) for f in table.functions]
    return AnomalyReport(results, len(table), config)
