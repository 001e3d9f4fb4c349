"""Synthetic multi-worker traces with injectable faults.

Workers run a synchronous data-parallel iteration built from a template of
phases (data loading, host-to-device copy, forward and backward kernels, a
ring all-reduce across hosts, an intra-host collective, the optimizer).
The all-reduce is a chunk pipeline: every ring advances one stage at a time
at the pace of its slowest link, so a healthy link in a ring with a slow
link bursts and then idles each stage, while the slow link itself streams
continuously at its reduced rate. Every worker leaves the all-reduce once
all rings are done.

All times inside the engine are integer nanoseconds on a shared global
clock; each worker's trace is shifted to its own local clock whose zero is
the start of its first profiled iteration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .detector import Marker, MarkerEvent
from .errors import InputMissing, SpecInvalid
from .trace import (
    Channel,
    CommScope,
    FunctionId,
    Kind,
    MetricSeries,
    TraceEvent,
    WorkerTrace,
    sort_and_nest,
    write_session,
)

NS = 1_000_000_000

TRAINING_TID = 1
LOADER_TID = 2
COMPUTE_TID = 7
RING_TID = 8
INTRA_TID = 9
COPY_TID = 10

SM_NOMINAL = 0.9
NVLINK_NOMINAL = 0.7
CPU_IDLE = 0.2
REROUTE_LOAD = 0.45  # extra PCIe utilization when intra-host traffic falls back from NVLink
LAUNCH_LATENCY_NS = 10_000
INIT_NS = 20_000

_STACK = ("train.py:<module>", "train.py:main", "train.py:train_step")


def _py(name: str, *frames: str) -> FunctionId:
    return FunctionId(Kind.PYTHON, name, _STACK + frames)


FN_NEXT = _py("dataloader.__next__", "torch/utils/data/dataloader.py:__next__")
FN_RECV = _py("socket.recv_into", "torch/utils/data/dataloader.py:__next__",
              "multiprocessing/connection.py:_recv", "socket.py:recv_into")
FN_INIT = _py("gradmode.__init__", "torch/autograd/grad_mode.py:__init__")
FN_STEP = _py("optimizer.step", "torch/optim/adamw.py:step")
FN_LOADER = FunctionId(Kind.PYTHON, "_worker_loop",
                       ("threading.py:_bootstrap", "torch/utils/data/_utils/worker.py:_worker_loop"))
FN_MEMCPY = FunctionId(Kind.MEMORY_OP, "Memcpy HtoD")
FN_ADAM = FunctionId(Kind.GPU_KERNEL, "multi_tensor_apply_kernel<AdamW>")

CPU_LEVEL = {FN_NEXT: 0.5, FN_RECV: 0.05, FN_INIT: 0.3, FN_STEP: 0.6}
CPU_FRAME = 0.6
CPU_GC = 0.95


class FaultKind(str, Enum):
    SLOW_NIC_BOND = "SlowNicBond"
    GPU_THROTTLE = "GpuThrottle"
    NVLINK_DOWN = "NvlinkDown"
    ASYNC_GC = "AsyncGc"
    LOAD_IMBALANCE = "LoadImbalance"
    SLOW_STORAGE = "SlowStorage"


@dataclass(frozen=True)
class FaultSpec:
    """One injected fault.

    target: {"workers": [...]}, {"worker": r}, {"hosts": [...]}, or
    {"host": h, "bond": b}; empty means every worker.
    magnitude: remaining capacity for SlowNicBond / GpuThrottle / NvlinkDown,
    pause seconds for AsyncGc, extra seconds per iteration for SlowStorage,
    half-width of the per-worker compute spread for LoadImbalance.
    onset/duration are in iterations; probability is per worker per iteration.
    """

    kind: FaultKind
    target: dict = field(default_factory=dict)
    magnitude: float = 0.5
    onset: int = 0
    duration: int | None = None
    probability: float | None = None

    def active(self, iteration: int) -> bool:
        if iteration < self.onset:
            return False
        return self.duration is None or iteration < self.onset + self.duration

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @staticmethod
    def from_dict(d: dict) -> FaultSpec:
        d = dict(d)
        try:
            d["kind"] = FaultKind(d["kind"])
        except (KeyError, ValueError):
            raise SpecInvalid(f"unknown fault kind in {d!r}") from None
        unknown = set(d) - {"kind", "target", "magnitude", "onset", "duration", "probability"}
        if unknown:
            raise SpecInvalid(f"unknown fault fields {sorted(unknown)}")
        return FaultSpec(**d)


DEFAULT_TEMPLATE: tuple[dict, ...] = (
    {"type": "dataloader", "seconds": 0.0004, "recv_fraction": 0.5},
    {"type": "memcpy", "seconds": 0.001},
    {"type": "compute", "name": "model.forward", "seconds": 0.06, "count": 12,
     "kernels": ["ampere_bf16_gemm_fwd", "layer_norm_fwd_kernel", "softmax_warp_forward"]},
    {"type": "compute", "name": "torch.autograd.backward", "seconds": 0.12, "count": 24,
     "kernels": ["ampere_bf16_gemm_bwd", "layer_norm_bwd_kernel", "softmax_warp_backward"]},
    {"type": "allreduce", "name": "ncclAllReduce_RING", "seconds": 0.03, "stages": 30},
    {"type": "intra", "name": "ncclAllGather_NVLS", "seconds": 0.005},
    {"type": "optimizer", "seconds": 0.008},
)

_PHASE_TYPES = {"dataloader", "memcpy", "compute", "allreduce", "intra", "optimizer"}


@dataclass
class ClusterSpec:
    workers: int = 32
    hosts: int = 4
    gpus_per_host: int = 8
    rings: int = 4
    nic_bond_bandwidth: float | list = 1.0  # per-bond capacity; list has hosts * rings entries
    nic_utilization: float = 0.5             # GPU-to-NIC utilization of a link at full rate
    iteration_template: list = field(default_factory=lambda: [dict(p) for p in DEFAULT_TEMPLATE])
    window_seconds: float = 20.0
    sample_rate_hz: float = 10_000
    noise: float = 0.03
    jitter: float = 0.01
    warmup_iterations: int = 1
    loader_thread: bool = True

    def validate(self) -> ClusterSpec:
        if self.workers <= 0 or self.hosts <= 0 or self.gpus_per_host <= 0:
            raise SpecInvalid("workers, hosts and gpus_per_host must be positive")
        if self.workers != self.hosts * self.gpus_per_host:
            raise SpecInvalid(f"workers ({self.workers}) != hosts ({self.hosts}) x "
                              f"gpus_per_host ({self.gpus_per_host})")
        if self.rings <= 0 or self.gpus_per_host % self.rings:
            raise SpecInvalid(f"rings ({self.rings}) must divide gpus_per_host "
                              f"({self.gpus_per_host})")
        bonds = self.bond_capacity()
        if np.any(bonds <= 0) or np.any(bonds > 1):
            raise SpecInvalid("bond capacities must lie in (0, 1]")
        if not 0 < self.nic_utilization <= 1:
            raise SpecInvalid("nic_utilization must lie in (0, 1]")
        if self.window_seconds <= 0 or self.sample_rate_hz <= 0:
            raise SpecInvalid("window_seconds and sample_rate_hz must be positive")
        if not 0 <= self.noise < 1 or not 0 <= self.jitter < 1:
            raise SpecInvalid("noise and jitter must lie in [0, 1)")
        kinds = [p.get("type") for p in self.iteration_template]
        if any(k not in _PHASE_TYPES for k in kinds):
            raise SpecInvalid(f"unknown phase types in {kinds}")
        for p in self.iteration_template:
            if p.get("seconds", 0) <= 0:
                raise SpecInvalid(f"phase {p} needs a positive duration")
        return self

    @property
    def period_ns(self) -> int:
        return int(round(NS / self.sample_rate_hz))

    @property
    def window_ns(self) -> int:
        return int(round(self.window_seconds * NS))

    def bond_capacity(self) -> np.ndarray:
        n = self.hosts * self.rings
        if isinstance(self.nic_bond_bandwidth, (int, float)):
            return np.full(n, float(self.nic_bond_bandwidth))
        arr = np.asarray(self.nic_bond_bandwidth, dtype=float)
        if arr.shape != (n,):
            raise SpecInvalid(f"nic_bond_bandwidth needs {n} entries (hosts x rings)")
        return arr

    def host_of(self, rank: int) -> int:
        return rank // self.gpus_per_host

    def ring_of(self, rank: int) -> int:
        return (rank % self.gpus_per_host) // (self.gpus_per_host // self.rings)

    def ring_members(self) -> list[list[int]]:
        """Ring order alternates hosts so consecutive members sit on different hosts."""
        per = self.gpus_per_host // self.rings
        out = []
        for r in range(self.rings):
            out.append([h * self.gpus_per_host + r * per + slot
                        for slot in range(per) for h in range(self.hosts)])
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> ClusterSpec:
        known = set(ClusterSpec.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecInvalid(f"unknown cluster fields {sorted(unknown)}")
        return ClusterSpec(**d).validate()


@dataclass
class Scenario:
    cluster: ClusterSpec
    faults: list[FaultSpec] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"cluster": self.cluster.to_dict(), "faults": [f.to_dict() for f in self.faults],
                "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> Scenario:
        if not isinstance(d, dict):
            raise SpecInvalid("scenario must be a JSON object")
        cluster = ClusterSpec.from_dict(d.get("cluster", {}))
        faults = [FaultSpec.from_dict(f) for f in d.get("faults", [])]
        for f in faults:
            _fault_targets(cluster, f)
        return Scenario(cluster, faults, int(d.get("seed", 0)))

    @staticmethod
    def load(path: str | Path) -> Scenario:
        path = Path(path)
        if not path.exists():
            raise InputMissing(f"{path}: no such spec file")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SpecInvalid(f"{path}: not valid JSON ({exc.msg})") from None
        try:
            return Scenario.from_dict(data)
        except TypeError as exc:
            raise SpecInvalid(f"{path}: {exc}") from None


def _fault_targets(spec: ClusterSpec, fault: FaultSpec) -> np.ndarray:
    """Boolean mask of workers hit by ``fault``."""
    mask = np.zeros(spec.workers, dtype=bool)
    t = fault.target or {}
    try:
        if not t:
            mask[:] = True
        if "worker" in t:
            mask[int(t["worker"])] = True
        for w in t.get("workers", []):
            mask[int(w)] = True
        for h in t.get("hosts", []):
            if not 0 <= int(h) < spec.hosts:
                raise IndexError(h)
            mask[int(h) * spec.gpus_per_host:(int(h) + 1) * spec.gpus_per_host] = True
        if "host" in t and "bond" in t:
            h, b = int(t["host"]), int(t["bond"])
            if not (0 <= h < spec.hosts and 0 <= b < spec.rings):
                raise IndexError((h, b))
            per = spec.gpus_per_host // spec.rings
            lo = h * spec.gpus_per_host + b * per
            mask[lo:lo + per] = True
    except IndexError:
        raise SpecInvalid(f"fault target {t} outside the cluster") from None
    return mask


@dataclass
class _Factors:
    link_rate: np.ndarray
    nic_util: np.ndarray
    sm_factor: np.ndarray
    compute_mult: np.ndarray
    nvlink_down: np.ndarray
    storage_extra_ns: np.ndarray
    gc_prob: np.ndarray
    gc_pause_ns: np.ndarray


class _Recorder:
    """Column store for events and metric segments across iterations."""

    def __init__(self, workers: int):
        self.workers = workers
        self.fn_index: dict[tuple, int] = {}
        self.fn_list: list[tuple[FunctionId, int, bool]] = []
        self.ev: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        # channel -> layer -> list of (worker, start, end, value)
        self.seg: dict[Channel, dict[int, list]] = {ch: {} for ch in Channel}
        self.gc_pauses = np.zeros(workers, dtype=np.int64)

    def fn(self, f: FunctionId, tid: int, tt: bool) -> int:
        key = (f, tid, tt)
        idx = self.fn_index.get(key)
        if idx is None:
            idx = self.fn_index[key] = len(self.fn_list)
            self.fn_list.append(key)
        return idx

    def event(self, f: FunctionId, tid: int, tt: bool, workers, start, end):
        workers = np.asarray(workers, dtype=np.int64)
        start = np.broadcast_to(np.asarray(start, dtype=np.int64), workers.shape)
        end = np.broadcast_to(np.asarray(end, dtype=np.int64), workers.shape)
        fid = np.full(workers.shape, self.fn(f, tid, tt), dtype=np.int64)
        self.ev.append((fid.ravel(), workers.ravel(), start.ravel().copy(), end.ravel().copy()))

    def segment(self, channel: Channel, workers, start, end, value, layer: int = 0):
        workers = np.asarray(workers, dtype=np.int64)
        shape = np.broadcast_shapes(workers.shape, np.shape(start), np.shape(end), np.shape(value))
        cols = [np.broadcast_to(np.asarray(x), shape).ravel()
                for x in (workers, start, end, value)]
        self.seg[channel].setdefault(layer, []).append(tuple(cols))


@dataclass
class SimulationResult:
    scenario: Scenario
    traces: list[WorkerTrace]
    truth: dict
    iteration_ns: list[int]

    def write(self, directory: str | Path, config: dict | None = None) -> dict:
        return write_session(directory, self.traces,
                             sample_rate_hz=self.scenario.cluster.sample_rate_hz,
                             config=config, extra={"scenario": self.scenario.to_dict(),
                                                   "truth": self.truth})


class _Engine:
    def __init__(self, spec: ClusterSpec, faults: Sequence[FaultSpec], seed: int):
        self.spec = spec.validate()
        self.faults = list(faults)
        ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFF)
        s_time, s_fault, s_noise, s_static = ss.spawn(4)
        self.rng = np.random.default_rng(s_time)
        self.rng_fault = np.random.default_rng(s_fault)
        self.rng_noise = np.random.default_rng(s_noise)
        rng_static = np.random.default_rng(s_static)
        W = spec.workers
        self.W = W
        self.host = np.arange(W) // spec.gpus_per_host
        self.rings = [np.asarray(m, dtype=np.int64) for m in spec.ring_members()]
        bonds = spec.bond_capacity()
        ring_idx = np.array([spec.ring_of(w) for w in range(W)])
        self.base_rate = bonds[self.host * spec.rings + ring_idx]
        self.masks = [_fault_targets(spec, f) for f in self.faults]
        # per-worker spread is drawn once per run so imbalance persists across iterations
        self.imbalance = {
            i: rng_static.uniform(1 - f.magnitude, 1 + f.magnitude, W)
            for i, f in enumerate(self.faults) if f.kind is FaultKind.LOAD_IMBALANCE
        }

    def factors(self, iteration: int) -> _Factors:
        W = self.W
        fx = _Factors(self.base_rate.copy(), np.full(W, self.spec.nic_utilization),
                      np.ones(W), np.ones(W), np.zeros(W, dtype=bool),
                      np.zeros(W, dtype=np.int64), np.zeros(W), np.zeros(W, dtype=np.int64))
        for i, (f, mask) in enumerate(zip(self.faults, self.masks)):
            if not f.active(iteration):
                continue
            k = f.kind
            if k is FaultKind.SLOW_NIC_BOND:
                fx.link_rate[mask] *= f.magnitude
            elif k is FaultKind.GPU_THROTTLE:
                fx.sm_factor[mask] *= f.magnitude
            elif k is FaultKind.NVLINK_DOWN:
                fx.nvlink_down |= mask
                fx.link_rate[mask] *= f.magnitude
            elif k is FaultKind.ASYNC_GC:
                fx.gc_prob[mask] = f.probability if f.probability is not None else 0.02
                fx.gc_pause_ns[mask] = int(round(f.magnitude * NS))
            elif k is FaultKind.LOAD_IMBALANCE:
                fx.compute_mult = np.where(mask, fx.compute_mult * self.imbalance[i],
                                           fx.compute_mult)
            elif k is FaultKind.SLOW_STORAGE:
                fx.storage_extra_ns[mask] += int(round(f.magnitude * NS))
        return fx

    def _dur(self, seconds: float, size) -> np.ndarray:
        j = self.spec.jitter
        return np.round(seconds * NS * self.rng.uniform(1 - j, 1 + j, size)).astype(np.int64)

    def iterate(self, iteration: int, start: np.ndarray, rec: _Recorder | None):
        """Advance every worker by one iteration. Returns (next start, optimizer-step start)."""
        spec = self.spec
        W = self.W
        all_w = np.arange(W)
        fx = self.factors(iteration)
        t = start.copy()
        step_at = t.copy()
        for phase in spec.iteration_template:
            kind = phase["type"]
            if kind == "dataloader":
                d = self._dur(phase["seconds"], W)
                recv = (d * phase.get("recv_fraction", 0.5)).astype(np.int64) + fx.storage_extra_ns
                own = d - (d * phase.get("recv_fraction", 0.5)).astype(np.int64)
                pre = own // 2
                end = t + own + recv
                gc_hit = self.rng_fault.random(W) < fx.gc_prob
                pause = INIT_NS + np.where(gc_hit, fx.gc_pause_ns, 0)
                if rec is not None:
                    rec.gc_pauses += gc_hit
                    rec.event(FN_NEXT, TRAINING_TID, True, all_w, t, end)
                    rec.event(FN_RECV, TRAINING_TID, True, all_w, t + pre, t + pre + recv)
                    rec.event(FN_INIT, TRAINING_TID, True, all_w, end, end + pause)
                    rec.segment(Channel.CPU, all_w, t, end, CPU_LEVEL[FN_NEXT], 0)
                    rec.segment(Channel.CPU, all_w, t + pre, t + pre + recv, CPU_LEVEL[FN_RECV], 1)
                    rec.segment(Channel.CPU, all_w, end, end + pause,
                                np.where(gc_hit, CPU_GC, CPU_LEVEL[FN_INIT]), 0)
                t = end + pause
            elif kind == "memcpy":
                d = self._dur(phase["seconds"], W)
                if rec is not None:
                    rec.event(FN_MEMCPY, COPY_TID, False, all_w, t, t + d)
                t = t + d
            elif kind == "compute":
                count = int(phase.get("count", 1))
                names = phase.get("kernels") or [phase["name"] + "_kernel"]
                per = phase["seconds"] / count
                d = self._dur(per, (W, count))
                d = np.round(d * (fx.compute_mult / fx.sm_factor)[:, None]).astype(np.int64)
                k0 = t + LAUNCH_LATENCY_NS
                ends = k0[:, None] + np.cumsum(d, axis=1)
                starts = ends - d
                if rec is not None:
                    frame = FunctionId(Kind.PYTHON, phase["name"],
                                       _STACK + (f"model.py:{phase['name'].split('.')[-1]}",))
                    frame_end = t + LAUNCH_LATENCY_NS + (0.7 * (ends[:, -1] - k0)).astype(np.int64)
                    rec.event(frame, TRAINING_TID, True, all_w, t, frame_end)
                    rec.segment(Channel.CPU, all_w, t, frame_end, CPU_FRAME, 0)
                    for j, name in enumerate(names):
                        cols = slice(j, None, len(names))
                        ww = np.broadcast_to(all_w[:, None], starts[:, cols].shape)
                        rec.event(FunctionId(Kind.GPU_KERNEL, name), COMPUTE_TID, False,
                                  ww, starts[:, cols], ends[:, cols])
                    rec.segment(Channel.SM_FREQ, all_w, k0, ends[:, -1], SM_NOMINAL * fx.sm_factor)
                t = ends[:, -1]
            elif kind == "allreduce":
                t = self._allreduce(phase, t, fx, rec)
            elif kind == "intra":
                base = self._dur(phase["seconds"], self.spec.hosts)
                slow_host = np.zeros(self.spec.hosts, dtype=bool)
                np.logical_or.at(slow_host, self.host, fx.nvlink_down)
                down_mag = min([f.magnitude for f in self.faults
                                if f.kind is FaultKind.NVLINK_DOWN and f.active(iteration)]
                               or [1.0])
                base = np.where(slow_host, np.round(base / down_mag), base).astype(np.int64)
                # an intra-host collective starts when the whole host has arrived
                host_start = np.zeros(self.spec.hosts, dtype=np.int64)
                np.maximum.at(host_start, self.host, t)
                s = host_start[self.host]
                e = s + base[self.host]
                if rec is not None:
                    f = FunctionId(Kind.COLLECTIVE, phase["name"], (), CommScope.INTRA)
                    rec.event(f, INTRA_TID, False, all_w, t, e)
                    ok = ~fx.nvlink_down
                    rec.segment(Channel.NVLINK, all_w[ok], s[ok], e[ok], NVLINK_NOMINAL)
                    down = fx.nvlink_down
                    if down.any():
                        rec.segment(Channel.NIC, all_w[down], s[down], e[down],
                                    min(0.98, REROUTE_LOAD + NVLINK_NOMINAL * 0.5))
                t = e
            elif kind == "optimizer":
                ps = self._dur(0.0003, W)
                d = self._dur(phase["seconds"], W)
                d = np.round(d / fx.sm_factor).astype(np.int64)
                step_at = t.copy()
                if rec is not None:
                    rec.event(FN_STEP, TRAINING_TID, True, all_w, t, t + ps)
                    rec.segment(Channel.CPU, all_w, t, t + ps, CPU_LEVEL[FN_STEP], 0)
                    rec.event(FN_ADAM, COMPUTE_TID, False, all_w, t + ps, t + ps + d)
                    rec.segment(Channel.SM_FREQ, all_w, t + ps, t + ps + d,
                                SM_NOMINAL * fx.sm_factor)
                t = t + ps + d
        if rec is not None and spec.loader_thread:
            # dataloader worker process thread: busy most of the iteration, never on the training thread
            rec.event(FN_LOADER, LOADER_TID, False, all_w, start, start + (t - start) // 2)
        return t, step_at

    def _allreduce(self, phase: dict, t: np.ndarray, fx: _Factors, rec: _Recorder | None):
        stages = int(phase.get("stages", 30))
        stage_ns = phase["seconds"] * NS / stages
        finish = np.zeros(len(self.rings), dtype=np.int64)
        plan = []
        for r, members in enumerate(self.rings):
            s_r = int(t[members].max())
            rates = fx.link_rate[members]
            stage_r, busy = stage_bursts(rates, stage_ns)
            finish[r] = s_r + int(round(stages * stage_r))
            plan.append((members, s_r, stage_r, busy))
        end_all = int(finish.max())
        if rec is not None:
            f = FunctionId(Kind.COLLECTIVE, phase["name"], (), CommScope.INTER)
            rec.event(f, RING_TID, False, np.arange(self.W), t, end_all)
            k = np.arange(stages)
            for members, s_r, stage_r, busy in plan:
                # a worker without NVLink pushes its intra-host hops through PCIe as well
                util = np.where(fx.nvlink_down[members],
                                np.minimum(0.98, fx.nic_util[members] + REROUTE_LOAD),
                                fx.nic_util[members] * fx.link_rate[members])
                for w, b, u in zip(members.tolist(), busy.tolist(), util.tolist()):
                    if b >= stage_r * (1 - 1e-9):
                        rec.segment(Channel.NIC, w, s_r, s_r + int(round(stages * stage_r)), u)
                    else:
                        b0 = s_r + np.round(k * stage_r).astype(np.int64)
                        rec.segment(Channel.NIC, np.full(stages, w), b0, b0 + int(round(b)), u)
        return np.full(self.W, end_all, dtype=np.int64)


def stage_bursts(rates: np.ndarray, stage_ns: float) -> tuple[float, np.ndarray]:
    """Chunk-pipeline lockstep for one ring.

    Every stage lasts as long as the slowest link needs for one chunk; each
    link moves the same chunk, so it is busy for ``stage_ns / rate`` of it.
    Returns (stage duration, per-link busy time), both in ns.
    """
    rates = np.asarray(rates, dtype=float)
    stage = stage_ns / float(rates.min())
    return stage, stage_ns / rates


def _paint(ts: np.ndarray, out: np.ndarray, cols) -> None:
    """Assign segment values to the samples they cover; segments in one call must not overlap."""
    w, s, e, v = cols
    a = np.searchsorted(ts, s, side="left")
    b = np.searchsorted(ts, e, side="left")
    keep = b > a
    if not keep.any():
        return
    a, b, v = a[keep], b[keep], v[keep].astype(np.float64)
    n = ts.size
    delta = np.zeros(n + 1)
    cover = np.zeros(n + 1, dtype=np.int64)
    np.add.at(delta, a, v)
    np.add.at(delta, b, -v)
    np.add.at(cover, a, 1)
    np.add.at(cover, b, -1)
    on = np.cumsum(cover)[:n] > 0
    out[on] = np.cumsum(delta)[:n][on]


def simulate(spec: ClusterSpec, faults: Sequence[FaultSpec] = (), seed: int = 0) -> SimulationResult:
    """Simulate one profiling window for every worker of ``spec``."""
    engine = _Engine(spec, faults, seed)
    W = spec.workers
    rec = _Recorder(W)
    start = np.zeros(W, dtype=np.int64)
    iteration = 0
    iteration_ns = []
    for _ in range(spec.warmup_iterations):
        nxt, _ = engine.iterate(iteration, start, None)
        iteration_ns.append(int(nxt[0] - start[0]))
        start = nxt
        iteration += 1
    w_start = start.copy()
    T = spec.window_ns
    while np.any(start < w_start + T):
        nxt, _ = engine.iterate(iteration, start, rec)
        iteration_ns.append(int(nxt[0] - start[0]))
        start = nxt
        iteration += 1
        if iteration > 10_000_000:
            raise SpecInvalid("iteration template never advances time")

    traces = _assemble(spec, rec, w_start, engine.rng_noise)
    truth = _ground_truth(spec, faults, engine)
    if any(f.kind is FaultKind.ASYNC_GC for f in faults):
        truth["gc_pauses"] = rec.gc_pauses.tolist()
    return SimulationResult(Scenario(spec, list(faults), seed), traces, truth, iteration_ns)


def _assemble(spec: ClusterSpec, rec: _Recorder, w_start: np.ndarray,
              rng_noise: np.random.Generator) -> list[WorkerTrace]:
    T = spec.window_ns
    W = spec.workers
    fid, wk, st, en = (np.concatenate(c) for c in zip(*rec.ev)) if rec.ev else (
        np.zeros(0, np.int64),) * 4
    st = st - w_start[wk]
    en = en - w_start[wk]
    keep = (en > 0) & (st < T) & (en > st)
    fid, wk, st, en = fid[keep], wk[keep], np.clip(st[keep], 0, T), np.clip(en[keep], 0, T)
    keep = en > st
    fid, wk, st, en = fid[keep], wk[keep], st[keep], en[keep]
    order = np.lexsort((en, st, wk))
    fid, wk, st, en = fid[order], wk[order], st[order], en[order]
    bounds = np.searchsorted(wk, np.arange(W + 1))

    ts = np.arange(0, T, spec.period_ns, dtype=np.int64)
    segs = {}
    for ch, layers in rec.seg.items():
        segs[ch] = {}
        for layer, parts in layers.items():
            w, s, e, v = (np.concatenate(c) for c in zip(*parts))
            s = s.astype(np.int64) - w_start[w]
            e = e.astype(np.int64) - w_start[w]
            o = np.argsort(w, kind="stable")
            w, s, e, v = w[o], s[o], e[o], v[o]
            segs[ch][layer] = (w, s, e, v, np.searchsorted(w, np.arange(W + 1)))

    baseline = {Channel.CPU: CPU_IDLE}
    traces = []
    fns = rec.fn_list
    for w in range(W):
        lo, hi = bounds[w], bounds[w + 1]
        events = [TraceEvent(w, fns[f][0], s, e, fns[f][1], None, fns[f][2])
                  for f, s, e in zip(fid[lo:hi].tolist(), st[lo:hi].tolist(), en[lo:hi].tolist())]
        events = sort_and_nest(events)
        metrics = []
        for ch in sorted(Channel, key=lambda c: c.value):
            vals = np.full(ts.size, baseline.get(ch, 0.0))
            for layer in sorted(segs.get(ch, {})):
                sw, ss_, se, sv, sb = segs[ch][layer]
                a, b = sb[w], sb[w + 1]
                _paint(ts, vals, (sw[a:b], ss_[a:b], se[a:b], sv[a:b]))
            if spec.noise:
                vals = vals * rng_noise.uniform(1 - spec.noise, 1 + spec.noise, ts.size)
            vals = np.round(np.clip(vals, 0.0, 1.0), 4)
            metrics.append(MetricSeries(w, ch, ts, vals))
        traces.append(WorkerTrace(w, (0, T), events, metrics))
    return traces


def _ground_truth(spec: ClusterSpec, faults: Sequence[FaultSpec], engine: _Engine) -> dict:
    truth: dict = {"rings": spec.ring_members(), "targets": {}}
    for f, mask in zip(faults, engine.masks):
        truth["targets"].setdefault(f.kind.value, [])
        truth["targets"][f.kind.value] = sorted(
            set(truth["targets"][f.kind.value]) | set(np.flatnonzero(mask).tolist()))
    slow = set()
    for f, mask in zip(faults, engine.masks):
        if f.kind in (FaultKind.SLOW_NIC_BOND, FaultKind.NVLINK_DOWN):
            slow |= set(np.flatnonzero(mask).tolist())
    in_ring, out_ring = [], []
    for members in spec.ring_members():
        if slow & set(members):
            in_ring.extend(m for m in members if m not in slow)
        else:
            out_ring.extend(members)
    truth["slow_link"] = sorted(slow)
    truth["in_ring"] = sorted(in_ring)
    truth["out_of_ring"] = sorted(out_ring)
    return truth


def simulate_to_directory(scenario: Scenario, directory: str | Path,
                          config: dict | None = None) -> SimulationResult:
    result = simulate(scenario.cluster, scenario.faults, scenario.seed)
    result.write(directory, config)
    return result


def marker_stream(iteration_seconds: float | Sequence[float], iterations: int, *,
                  slowdowns: Sequence[tuple[int, float]] = (),
                  stall_at: int | None = None,
                  sequence: Sequence[Marker] = (Marker.NEXT, Marker.STEP),
                  start_ns: int = 0) -> list[MarkerEvent]:
    """Markers for ``iterations`` iterations of a fixed template.

    Each iteration emits ``sequence`` spread evenly so the first marker is at
    the iteration start and the last at its end. ``slowdowns`` is a list of
    (first iteration, duration factor). ``stall_at`` stops the stream right
    after the first marker of that iteration.
    """
    seq = list(sequence)
    out = []
    t = start_ns
    for i in range(iterations):
        if isinstance(iteration_seconds, (int, float)):
            base = float(iteration_seconds)
        else:
            base = float(iteration_seconds[i])
        factor = 1.0
        for onset, f in slowdowns:
            if i >= onset:
                factor = f
        d = int(round(base * factor * NS))
        n = len(seq)
        for j, kind in enumerate(seq):
            ts = t + (d * j) // (n - 1) if n > 1 else t
            out.append(MarkerEvent(kind, ts))
            if stall_at is not None and i == stall_at:
                return out
        t += d
    return out


def simulate_markers(spec: ClusterSpec, faults: Sequence[FaultSpec], iterations: int,
                     seed: int = 0, rank: int = 0) -> list[MarkerEvent]:
    """Dataloader/optimizer markers of one worker, timed by the simulation engine.

    Fault onsets count from the first iteration of this stream.
    """
    engine = _Engine(spec, faults, seed)
    start = np.zeros(spec.workers, dtype=np.int64)
    out = []
    for i in range(iterations):
        nxt, step_at = engine.iterate(i, start, None)
        out.append(MarkerEvent(Marker.NEXT, int(start[rank])))
        out.append(MarkerEvent(Marker.STEP, int(step_at[rank])))
        start = nxt
    return out


def with_onset(faults: Iterable[FaultSpec], onset: int) -> list[FaultSpec]:
    return [replace(f, onset=onset) for f in faults]
