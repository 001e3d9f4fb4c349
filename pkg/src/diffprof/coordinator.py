"""Synchronized profiling by iteration id.

Rank 0 reports its current iteration. On a trigger the coordinator picks a
start iteration a few steps ahead and a stop iteration that covers the
profiling window; every daemon polls the plan and profiles [start, stop) of
its own worker. No wall-clock comparison between hosts is involved.
"""

from __future__ import annotations

import heapq
import json
import math
import socket
import socketserver
import threading
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import CoordinatorTimeout, MissedWindow, NonPositiveIterationTime

DEFAULT_LEAD = 3


class Phase(str, Enum):
    IDLE = "Idle"
    ARMED = "Armed"
    PROFILING = "Profiling"
    UPLOADING = "Uploading"
    DONE = "Done"


@dataclass(frozen=True)
class ProfilingPlan:
    start_iteration: int
    stop_iteration: int
    window_seconds: float = 20.0
    lead_iterations: int = DEFAULT_LEAD

    def to_wire(self) -> str:
        return json.dumps({"start": self.start_iteration, "stop": self.stop_iteration,
                           "window_s": self.window_seconds}, separators=(",", ":"))

    @staticmethod
    def from_wire(line: str) -> ProfilingPlan:
        rec = json.loads(line)
        return ProfilingPlan(int(rec["start"]), int(rec["stop"]), float(rec["window_s"]))


@dataclass(frozen=True)
class DaemonState:
    worker: int
    current_iteration: int = 0
    phase: Phase = Phase.IDLE
    plan: ProfilingPlan | None = None  # plan this daemon is acting on

    def ack(self) -> str:
        return json.dumps({"rank": self.worker, "phase": self.phase.value,
                           "iter": self.current_iteration}, separators=(",", ":"))


def plan_profiling(rank0_iteration: int, mean_iteration_seconds: float,
                   window_seconds: float = 20.0, lead: int = DEFAULT_LEAD) -> ProfilingPlan:
    if not mean_iteration_seconds > 0:
        raise NonPositiveIterationTime(f"mean iteration time {mean_iteration_seconds} s")
    start = rank0_iteration + lead
    span = max(1, math.ceil(window_seconds / mean_iteration_seconds))
    return ProfilingPlan(start, start + span, window_seconds, lead)


def daemon_poll(state: DaemonState, plan: ProfilingPlan | None) -> DaemonState:
    """Advance one daemon by one observation of (its worker's iteration, the published plan).

    Raises MissedWindow when a fresh plan is first seen at or after its start.
    """
    it = state.current_iteration
    phase = state.phase
    if phase is Phase.IDLE:
        if plan is None or plan == state.plan:
            return state
        if it >= plan.start_iteration:
            raise MissedWindow(state.worker, it, plan.start_iteration)
        return replace(state, phase=Phase.ARMED, plan=plan)
    active = state.plan
    if phase is Phase.ARMED:
        if it >= active.start_iteration:
            return replace(state, phase=Phase.PROFILING)
        return state
    if phase is Phase.PROFILING:
        if it >= active.stop_iteration:
            return replace(state, phase=Phase.UPLOADING)
        return state
    if phase is Phase.UPLOADING:
        return replace(state, phase=Phase.DONE)
    # DONE: go idle; the finished plan is remembered so it is not re-armed
    return replace(state, phase=Phase.IDLE)


class Coordinator:
    """Rank-0 side: turns a trigger into a plan and watches for a stalled rank 0."""

    def __init__(self, window_seconds: float = 20.0, lead: int = DEFAULT_LEAD,
                 timeout_multiplier: float = 5.0):
        self.window_seconds = window_seconds
        self.lead = lead
        self.timeout_multiplier = timeout_multiplier
        self.plan: ProfilingPlan | None = None
        self.rank0_iteration = 0
        self._planned_at: float | None = None
        self._progress_at: float | None = None

    def report(self, iteration: int, now: float):
        if iteration != self.rank0_iteration:
            self._progress_at = now
        self.rank0_iteration = iteration

    def on_trigger(self, mean_iteration_seconds: float, now: float) -> ProfilingPlan:
        self.plan = plan_profiling(self.rank0_iteration, mean_iteration_seconds,
                                   self.window_seconds, self.lead)
        self._planned_at = now
        self._progress_at = now
        return self.plan

    def check(self, now: float):
        """Abort the session when rank 0 has not advanced for 5x the window after planning."""
        if self.plan is None or self._progress_at is None:
            return
        if now - self._progress_at >= self.timeout_multiplier * self.window_seconds:
            plan, self.plan = self.plan, None
            raise CoordinatorTimeout(
                f"rank 0 stuck at iteration {self.rank0_iteration} for "
                f"{now - self._progress_at:.1f} s after plan {plan.to_wire()}")


@dataclass
class ProtocolOutcome:
    plan: ProfilingPlan
    ranges: dict[int, tuple[int, int]]
    missed: list[int] = field(default_factory=list)
    unfinished: list[int] = field(default_factory=list)

    @property
    def agreed(self) -> bool:
        return (not self.missed and not self.unfinished
                and len(set(self.ranges.values())) == 1
                and next(iter(self.ranges.values())) ==
                (self.plan.start_iteration, self.plan.stop_iteration))


def simulate_protocol(n_daemons: int, seed: int = 0, *, iteration_seconds: float = 1.0,
                      window_seconds: float = 20.0, lead: int = DEFAULT_LEAD,
                      max_poll_offset: float = 1.0, worker_skew: float = 0.25,
                      report_interval: float = 0.5, trigger_at: float | None = None,
                      plan_latency: float = 0.05) -> ProtocolOutcome:
    """Single-threaded discrete-event run of the protocol with ``n_daemons`` workers.

    Workers reach iteration boundaries at ``i * iteration_seconds + skew_w``;
    each daemon polls every ``poll_interval_w`` <= ``max_poll_offset`` iterations
    starting at a random offset; rank 0 reports its iteration every
    ``report_interval`` iterations. ``trigger_at`` (drawn in [40, 60) when None)
    and ``plan_latency`` are in iterations too. The profiled range of a daemon
    is the set of iterations it observed while Profiling.
    """
    rng = np.random.default_rng(seed)
    if trigger_at is None:
        trigger_at = float(rng.uniform(40.0, 60.0))
    trigger_at *= iteration_seconds
    report_interval *= iteration_seconds
    plan_latency *= iteration_seconds
    skew = rng.uniform(0.0, worker_skew, n_daemons) * iteration_seconds
    skew[0] = 0.0
    poll_interval = rng.uniform(0.25, max_poll_offset, n_daemons) * iteration_seconds
    poll_offset = rng.uniform(0.0, 1.0, n_daemons) * poll_interval

    def iteration_of(w: int, t: float) -> int:
        return max(0, int(math.floor((t - skew[w]) / iteration_seconds)))

    coord = Coordinator(window_seconds, lead)
    states = {w: DaemonState(w) for w in range(n_daemons)}
    seen: dict[int, list[int]] = {w: [] for w in range(n_daemons)}
    missed: list[int] = []
    published: ProfilingPlan | None = None

    # (time, order, kind, worker)
    queue: list[tuple[float, int, str, int]] = []
    order = 0

    def push(t, kind, w=-1):
        nonlocal order
        heapq.heappush(queue, (t, order, kind, w))
        order += 1

    push(0.0, "report")
    push(trigger_at, "trigger")
    for w in range(n_daemons):
        push(poll_offset[w], "poll", w)

    horizon = trigger_at + 3 * window_seconds + (lead + 5) * iteration_seconds
    while queue:
        t, _, kind, w = heapq.heappop(queue)
        if t > horizon:
            break
        if kind == "report":
            coord.report(iteration_of(0, t), t)
            push(t + report_interval, "report")
        elif kind == "trigger":
            plan = coord.on_trigger(iteration_seconds, t)
            push(t + plan_latency, "publish")
        elif kind == "publish":
            published = coord.plan
        elif kind == "poll":
            st = replace(states[w], current_iteration=iteration_of(w, t))
            try:
                st = daemon_poll(st, published)
            except MissedWindow:
                missed.append(w)
                st = replace(st, plan=published)
            if st.phase is Phase.PROFILING:
                seen[w].append(st.current_iteration)
            states[w] = st
            if not (st.phase is Phase.IDLE and st.plan is not None and st.plan == published):
                push(t + poll_interval[w], "poll", w)

    plan = published
    ranges = {w: (min(its), max(its) + 1) for w, its in seen.items() if its}
    unfinished = [w for w in range(n_daemons)
                  if w not in missed and not (states[w].plan == plan and
                                              states[w].phase in (Phase.IDLE, Phase.DONE))]
    return ProtocolOutcome(plan, ranges, missed, unfinished)


class PlanServer(socketserver.ThreadingTCPServer):
    """Loopback plan/ack exchange. A client sends one ack line and receives the
    current plan line (``null`` when no plan is published)."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.plan: ProfilingPlan | None = None
        self.acks: list[dict] = []
        self._lock = threading.Lock()
        super().__init__((host, port), _PlanHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def publish(self, plan: ProfilingPlan | None):
        with self._lock:
            self.plan = plan

    def serve_in_background(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, daemon=True)
        th.start()
        return th


class _PlanHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            with self.server._lock:
                self.server.acks.append(json.loads(line))
                plan = self.server.plan
            reply = plan.to_wire() if plan is not None else "null"
            self.wfile.write((reply + "\n").encode("utf-8"))
            self.wfile.flush()


def poll_plan(address: tuple[str, int], state: DaemonState,
              timeout: float = 5.0) -> ProfilingPlan | None:
    """One daemon poll over the loopback protocol: send our ack, read the plan."""
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall((state.ack() + "\n").encode("utf-8"))
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(4096)
            if not chunk:
                break
            buf += chunk
    line = buf.decode("utf-8").strip()
    return None if line in ("", "null") else ProfilingPlan.from_wire(line)
