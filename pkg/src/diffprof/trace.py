"""Trace data model and the line-delimited worker trace format.

A worker trace file holds one JSON object per line:

    {"t":"hdr","rank":3,"window":[0,20000000000],"rate":10000}          (optional, first line)
    {"t":"ev","k":"gpu","n":"gemm_fwd","cs":[],"s":100,"e":900,"tid":7,"tt":false}
    {"t":"ev","k":"comm","n":"ncclAllReduce","cs":[],"s":..,"e":..,"tid":8,"tt":false,"scope":"inter"}
    {"t":"hw","ch":"nic","ts":100000,"v":0.61}

Timestamps are integer nanoseconds on the worker's own clock. Values in
"hw" records are utilizations already normalized to [0, 1].
A session directory holds ``worker_<rank>.trace`` files plus ``session.json``.
"""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateWorker,
    EmptyTrace,
    InputMissing,
    InvariantViolation,
    MalformedRecord,
    NoWorkers,
)

SESSION_FILE = "session.json"
TRACE_GLOB = "worker_*.trace"
_TRACE_NAME = re.compile(r"^worker_(\d+)\.trace$")

DEFAULT_WINDOW_SECONDS = 20.0
DEFAULT_SAMPLE_RATE_HZ = 10_000


class Kind(str, Enum):
    GPU_KERNEL = "gpu"
    MEMORY_OP = "mem"
    COLLECTIVE = "comm"
    PYTHON = "py"

    @property
    def priority(self) -> int:
        """Critical-path precedence: a higher level masks every lower one."""
        return _PRIORITY[self]


_PRIORITY = {Kind.GPU_KERNEL: 3, Kind.MEMORY_OP: 2, Kind.COLLECTIVE: 1, Kind.PYTHON: 0}


class CommScope(str, Enum):
    INTRA = "intra"
    INTER = "inter"


class Channel(str, Enum):
    SM_FREQ = "sm"
    CPU = "cpu"
    NVLINK = "nvlink"
    NIC = "nic"


@dataclass(frozen=True)
class FunctionId:
    kind: Kind
    name: str
    call_stack: tuple[str, ...] = ()
    comm_scope: CommScope | None = None

    def __post_init__(self):
        if not isinstance(self.call_stack, tuple):
            object.__setattr__(self, "call_stack", tuple(self.call_stack))
        if (self.kind is Kind.COLLECTIVE) != (self.comm_scope is not None):
            raise ValueError(f"comm_scope must be set iff kind is collective: {self!r}")
        if self.call_stack and self.kind is not Kind.PYTHON:
            raise ValueError(f"only Python functions carry a call stack: {self!r}")

    @property
    def key(self) -> str:
        """Stable string identity, used for hashing into seeds and for sorting."""
        scope = self.comm_scope.value if self.comm_scope else ""
        return "\x1f".join((self.kind.value, scope, self.name, *self.call_stack))

    def to_wire(self) -> dict:
        out = {"k": self.kind.value, "n": self.name, "cs": list(self.call_stack)}
        if self.comm_scope is not None:
            out["scope"] = self.comm_scope.value
        return out

    @staticmethod
    def from_wire(data: dict) -> FunctionId:
        scope = data.get("scope")
        return FunctionId(
            Kind(data["k"]),
            str(data["n"]),
            tuple(data.get("cs") or ()),
            CommScope(scope) if scope is not None else None,
        )

    def label(self, max_frames: int = 2) -> str:
        if not self.call_stack:
            return self.name
        frames = self.call_stack[-max_frames:]
        prefix = "... > " if len(self.call_stack) > max_frames else ""
        return f"{self.name} [{prefix}{' > '.join(frames)}]"


@dataclass(frozen=True, slots=True)
class TraceEvent:
    worker: int
    function: FunctionId
    start: int
    end: int
    thread_id: int
    parent_index: int | None = None
    is_training_thread: bool = False

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass(eq=False)
class MetricSeries:
    worker: int
    channel: Channel
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.timestamps.ndim != 1:
            raise InvariantViolation(f"{self.channel.value}: timestamps/values shape mismatch")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise InvariantViolation(f"{self.channel.value}: timestamps not strictly increasing")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise InvariantViolation(f"{self.channel.value}: value outside [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, MetricSeries):
            return NotImplemented
        return (
            self.worker == other.worker
            and self.channel == other.channel
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
        )

    def __len__(self):
        return int(self.timestamps.size)

    def between(self, start: int, end: int) -> np.ndarray:
        """Values of samples whose timestamp lies in the closed interval [start, end]."""
        lo = np.searchsorted(self.timestamps, start, side="left")
        hi = np.searchsorted(self.timestamps, end, side="right")
        return self.values[lo:hi]


@dataclass
class WorkerTrace:
    worker: int
    window: tuple[int, int]
    events: list[TraceEvent]
    metrics: list[MetricSeries] = field(default_factory=list)

    @property
    def window_length(self) -> int:
        return self.window[1] - self.window[0]

    def series(self, channel: Channel) -> MetricSeries | None:
        for s in self.metrics:
            if s.channel == channel:
                return s
        return None

    def functions(self) -> set[FunctionId]:
        return {e.function for e in self.events}

    def shifted(self, offset: int) -> WorkerTrace:
        """Same trace with every timestamp moved by ``offset`` ns."""
        events = [
            TraceEvent(e.worker, e.function, e.start + offset, e.end + offset,
                       e.thread_id, e.parent_index, e.is_training_thread)
            for e in self.events
        ]
        metrics = [MetricSeries(s.worker, s.channel, s.timestamps + offset, s.values.copy())
                   for s in self.metrics]
        return WorkerTrace(self.worker, (self.window[0] + offset, self.window[1] + offset),
                           events, metrics)


@dataclass(frozen=True)
class SessionSummary:
    worker_count: int
    ranks: tuple[int, ...]
    functions: frozenset
    channel_coverage: dict

    @property
    def full_channel_coverage(self) -> bool:
        return all(n == self.worker_count for n in self.channel_coverage.values())


def sort_and_nest(events: Sequence[TraceEvent],
                  explicit: dict[int, int | None] | None = None) -> list[TraceEvent]:
    """Sort events by start and fill ``parent_index`` from per-thread containment.

    Ties on start go to the longer interval, which becomes the parent.
    ``explicit`` maps an input position to the input position of its parent
    (or None for "no parent") and overrides the inferred value.
    """
    order = sorted(range(len(events)),
                   key=lambda i: (events[i].start, -events[i].end, events[i].thread_id, i))
    new_pos = {old: new for new, old in enumerate(order)}
    ordered = [events[i] for i in order]
    parents: list[int | None] = [None] * len(ordered)

    stacks: dict[int, list[int]] = defaultdict(list)
    for idx, ev in enumerate(ordered):
        stack = stacks[ev.thread_id]
        while stack:
            top = ordered[stack[-1]]
            if top.start <= ev.start and ev.end <= top.end:
                parents[idx] = stack[-1]
                break
            stack.pop()
        stack.append(idx)

    if explicit:
        for old, parent_old in explicit.items():
            idx = new_pos[old]
            if parent_old is None:
                parents[idx] = None
                continue
            if parent_old not in new_pos:
                raise InvariantViolation(f"parent index {parent_old} does not name an event")
            pidx = new_pos[parent_old]
            child, parent = ordered[idx], ordered[pidx]
            if (parent.thread_id != child.thread_id or parent.start > child.start
                    or child.end > parent.end or pidx == idx):
                raise InvariantViolation(
                    f"event {old} is not contained in its declared parent {parent_old}")
            parents[idx] = pidx

    return [
        ev if ev.parent_index == parents[i] else
        TraceEvent(ev.worker, ev.function, ev.start, ev.end, ev.thread_id, parents[i],
                   ev.is_training_thread)
        for i, ev in enumerate(ordered)
    ]


def rank_from_filename(path: str | Path) -> int | None:
    m = _TRACE_NAME.match(Path(path).name)
    return int(m.group(1)) if m else None


def _session_meta(directory: Path) -> dict | None:
    meta_path = directory / SESSION_FILE
    if not meta_path.exists():
        return None
    with open(meta_path, encoding="utf-8") as fh:
        return json.load(fh)


def _require(cond: bool, reason: str, lineno: int, path: str, exc=MalformedRecord):
    if not cond:
        raise exc(reason, lineno, path)


def load_worker_trace(path: str | Path, *, rank: int | None = None,
                      window: tuple[int, int] | None = None) -> WorkerTrace:
    """Parse and validate one worker trace file.

    The rank comes from (in order) the argument, the header record, or the
    ``worker_<rank>.trace`` filename. The window comes from the argument, the
    header, the sibling ``session.json``, or finally the extent of the data.
    """
    path = Path(path)
    if not path.exists():
        raise InputMissing(f"{path}: no such trace file")
    spath = str(path)

    header: dict | None = None
    raw_events: list[tuple] = []
    explicit: dict[int, int | None] = {}
    samples: dict[Channel, tuple[list[int], list[float]]] = {}
    fn_cache: dict[tuple, FunctionId] = {}

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"not valid JSON ({exc.msg})", lineno, spath) from None
            _require(isinstance(rec, dict), "record is not an object", lineno, spath)
            tag = rec.get("t")
            try:
                if tag == "hw":
                    ch = Channel(rec["ch"])
                    ts = rec["ts"]
                    v = rec["v"]
                    _require(isinstance(ts, int) and not isinstance(ts, bool),
                             "sample timestamp must be an integer", lineno, spath)
                    _require(isinstance(v, (int, float)) and not isinstance(v, bool),
                             "sample value must be a number", lineno, spath)
                    _require(0.0 <= v <= 1.0, f"sample value {v} outside [0, 1]",
                             lineno, spath, InvariantViolation)
                    tss, vals = samples.setdefault(ch, ([], []))
                    _require(not tss or ts > tss[-1],
                             "sample timestamps not strictly increasing", lineno, spath,
                             InvariantViolation)
                    tss.append(ts)
                    vals.append(float(v))
                elif tag == "ev":
                    s, e = rec["s"], rec["e"]
                    _require(all(isinstance(x, int) and not isinstance(x, bool) for x in (s, e)),
                             "event timestamps must be integers", lineno, spath)
                    _require(s < e, f"event end {e} <= start {s}", lineno, spath,
                             InvariantViolation)
                    cs = rec.get("cs") or []
                    _require(isinstance(cs, list), "call stack must be a list", lineno, spath)
                    fkey = (rec["k"], rec["n"], tuple(cs), rec.get("scope"))
                    fn = fn_cache.get(fkey)
                    if fn is None:
                        try:
                            fn = FunctionId.from_wire(rec)
                        except ValueError as exc:
                            raise MalformedRecord(str(exc), lineno, spath) from None
                        fn_cache[fkey] = fn
                    tid = rec.get("tid", 0)
                    _require(isinstance(tid, int), "thread id must be an integer", lineno, spath)
                    if "p" in rec:
                        explicit[len(raw_events)] = rec["p"]
                    raw_events.append((fn, s, e, tid, bool(rec.get("tt", False))))
                elif tag == "hdr":
                    _require(header is None and not raw_events and not samples,
                             "header must be the first record", lineno, spath)
                    header = rec
                else:
                    raise MalformedRecord(f"unknown record type {tag!r}", lineno, spath)
            except KeyError as exc:
                raise MalformedRecord(f"missing field {exc.args[0]!r}", lineno, spath) from None
            except ValueError as exc:
                raise MalformedRecord(str(exc), lineno, spath) from None

    if not raw_events and not samples:
        raise EmptyTrace(f"{spath}: no events or samples")

    if rank is None and header is not None and "rank" in header:
        rank = int(header["rank"])
    if rank is None:
        rank = rank_from_filename(path)
    if rank is None:
        raise MalformedRecord("cannot determine worker rank (no header, unexpected filename)",
                              None, spath)

    if window is None and header is not None and "window" in header:
        window = tuple(header["window"])
    if window is None:
        meta = _session_meta(path.parent)
        if meta is not None and "window" in meta:
            window = tuple(meta["window"])
    if window is None:
        lo = [r[1] for r in raw_events] + [v[0][0] for v in samples.values()]
        hi = [r[2] for r in raw_events] + [v[0][-1] for v in samples.values()]
        window = (min(lo), max(hi))
    window = (int(window[0]), int(window[1]))
    if window[1] <= window[0]:
        raise InvariantViolation(f"empty window {window}", None, spath)

    events = [TraceEvent(rank, fn, s, e, tid, None, tt) for fn, s, e, tid, tt in raw_events]
    for fn, s, e, *_ in raw_events:
        if e <= window[0] or s >= window[1]:
            raise InvariantViolation(f"event {fn.name} [{s}, {e}] outside window {window}",
                                     None, spath)
    try:
        events = sort_and_nest(events, explicit)
    except InvariantViolation as exc:
        raise InvariantViolation(exc.reason, None, spath) from None

    metrics = [MetricSeries(rank, ch, np.array(tss, dtype=np.int64), np.array(vals))
               for ch, (tss, vals) in sorted(samples.items(), key=lambda kv: kv[0].value)]
    return WorkerTrace(rank, window, events, metrics)


def write_worker_trace(trace: WorkerTrace, path: str | Path, *,
                       sample_rate_hz: float | None = None,
                       explicit_parents: bool = False) -> int:
    """Write ``trace`` in the line-delimited format; returns bytes written."""
    header = {"t": "hdr", "rank": trace.worker, "window": list(trace.window)}
    if sample_rate_hz is not None:
        header["rate"] = sample_rate_hz
    lines = [json.dumps(header, separators=(",", ":"))]
    wire_cache: dict[FunctionId, str] = {}
    for ev in trace.events:
        fw = wire_cache.get(ev.function)
        if fw is None:
            fw = json.dumps(ev.function.to_wire(), separators=(",", ":"))[1:-1]
            wire_cache[ev.function] = fw
        tt = "true" if ev.is_training_thread else "false"
        extra = ""
        if explicit_parents:
            extra = ',"p":' + ("null" if ev.parent_index is None else str(ev.parent_index))
        lines.append(f'{{"t":"ev",{fw},"s":{ev.start},"e":{ev.end},"tid":{ev.thread_id},'
                     f'"tt":{tt}{extra}}}')
    for series in trace.metrics:
        prefix = f'{{"t":"hw","ch":"{series.channel.value}","ts":'
        lines.extend(f"{prefix}{t},\"v\":{v!r}}}"
                     for t, v in zip(series.timestamps.tolist(), series.values.tolist()))
    data = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(data)
    return len(data)


def trace_path(directory: str | Path, rank: int) -> Path:
    return Path(directory) / f"worker_{rank}.trace"


def list_worker_files(directory: str | Path) -> list[tuple[int, Path]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputMissing(f"{directory}: not a directory")
    found = []
    for p in directory.glob(TRACE_GLOB):
        rank = rank_from_filename(p)
        if rank is not None:
            found.append((rank, p))
    return sorted(found)


def write_session(directory: str | Path, traces: Iterable[WorkerTrace], *,
                  sample_rate_hz: float, config: dict | None = None,
                  extra: dict | None = None) -> dict:
    """Write one trace file per worker plus ``session.json``; returns the session metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ranks = []
    window = None
    total = 0
    for tr in traces:
        total += write_worker_trace(tr, trace_path(directory, tr.worker),
                                    sample_rate_hz=sample_rate_hz)
        ranks.append(tr.worker)
        window = tr.window if window is None else window
    meta = {
        "window": list(window) if window else None,
        "sample_rate_hz": sample_rate_hz,
        "workers": sorted(ranks),
        "trace_bytes": total,
        "config": config or {},
    }
    if extra:
        meta.update(extra)
    with open(directory / SESSION_FILE, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta


def load_session(directory: str | Path, ranks: Iterable[int] | None = None) -> list[WorkerTrace]:
    files = list_worker_files(directory)
    if ranks is not None:
        wanted = set(ranks)
        files = [(r, p) for r, p in files if r in wanted]
    if not files:
        raise NoWorkers(f"{directory}: no worker trace files")
    return [load_worker_trace(p, rank=r) for r, p in files]


def validate_session(traces: Sequence[WorkerTrace]) -> SessionSummary:
    if not traces:
        raise NoWorkers("session has no workers")
    seen: set[int] = set()
    functions: set[FunctionId] = set()
    coverage = {ch: 0 for ch in Channel}
    for tr in traces:
        if tr.worker in seen:
            raise DuplicateWorker(f"worker rank {tr.worker} appears more than once")
        seen.add(tr.worker)
        functions |= tr.functions()
        for s in tr.metrics:
            if len(s):
                coverage[s.channel] += 1
    return SessionSummary(len(traces), tuple(sorted(seen)), frozenset(functions), coverage)
