"""Iteration-time degradation detector driven by dataloader/optimizer marker events.

LEARNING: split the marker stream into candidate iterations (a run that
starts at a dataloader-next following an optimizer-step) until the same
candidate repeats ``learn_repeats`` times in a row.

MATCHING: follow the learned sequence, record the duration of each complete
match, and raise Slowdown when the mean of the last ``window`` durations
exceeds the episode's shortest duration by more than ``slowdown_fraction``.
``tick`` raises Blocked when a match is in progress and nothing has arrived
for ``blocked_multiplier`` mean iterations. ``relearn_after`` events without
a complete match send the detector back to LEARNING.
"""

from __future__ import annotations

import copy
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

from .errors import MalformedRecord, OutOfOrderEvent


class Marker(str, Enum):
    NEXT = "next"
    STEP = "step"


class State(str, Enum):
    LEARNING = "LEARNING"
    MATCHING = "MATCHING"


@dataclass(frozen=True)
class MarkerEvent:
    kind: Marker
    ts: int

    def to_wire(self) -> str:
        return json.dumps({"k": self.kind.value, "ts": self.ts}, separators=(",", ":"))


@dataclass(frozen=True)
class Tick:
    """Clock probe between markers; lets a recorded stream express idle time."""

    ts: int


@dataclass(frozen=True)
class Trigger:
    kind: str  # "Slowdown" or "Blocked"
    at: int
    evidence: tuple[float, float]

    def to_wire(self) -> str:
        return json.dumps({"kind": self.kind, "at": self.at, "evidence": list(self.evidence)},
                          separators=(",", ":"))


@dataclass(frozen=True)
class DetectorConfig:
    learn_repeats: int = 10        # M
    window: int = 50               # N
    relearn_after: int = 200       # K
    slowdown_fraction: float = 0.05
    blocked_multiplier: float = 5.0
    cooldown_ns: int = 600 * 10**9


@dataclass
class IterationModel:
    sequence: tuple[Marker, ...] = ()
    confirmed_count: int = 0
    recent_durations: deque = field(default_factory=deque)
    recent_min: int | None = None
    unmatched_events: int = 0


class DegradationDetector:
    def __init__(self, config: DetectorConfig | None = None):
        self.config = config or DetectorConfig()
        self.state = State.LEARNING
        self.model = IterationModel(recent_durations=deque(maxlen=self.config.window))
        self.transitions: list[tuple[int, State]] = []
        self.last_ts: int | None = None
        self._candidate: list[Marker] = []
        self._ref: tuple[Marker, ...] | None = None
        self._pos = 0
        self._match_start: int | None = None
        self._last_trigger: int | None = None
        self._blocked_armed = True

    def snapshot(self) -> DegradationDetector:
        return copy.deepcopy(self)

    def mean_duration(self) -> float | None:
        d = self.model.recent_durations
        return sum(d) / len(d) if d else None

    def _enter(self, state: State, ts: int):
        self.state = state
        self.transitions.append((ts, state))

    def _relearn(self, ts: int):
        self.model = IterationModel(recent_durations=deque(maxlen=self.config.window))
        self._candidate = []
        self._ref = None
        self._pos = 0
        self._match_start = None
        self._enter(State.LEARNING, ts)

    def _fire(self, kind: str, ts: int, evidence) -> Trigger | None:
        if self._last_trigger is not None and ts - self._last_trigger < self.config.cooldown_ns:
            return None
        self._last_trigger = ts
        return Trigger(kind, ts, tuple(float(x) for x in evidence))

    def feed(self, event: MarkerEvent) -> Trigger | None:
        if self.last_ts is not None and event.ts < self.last_ts:
            raise OutOfOrderEvent(f"marker at {event.ts} precedes previous marker at {self.last_ts}")
        self.last_ts = event.ts
        self._blocked_armed = True
        if self.state is State.LEARNING:
            self._learn(event)
            return None
        return self._match(event)

    def _learn(self, event: MarkerEvent):
        cand = self._candidate
        if event.kind is Marker.NEXT and cand and cand[-1] is Marker.STEP:
            # a new iteration begins; the open candidate was complete
            self._close_candidate(tuple(cand), event.ts)
            cand = self._candidate = []
            if self.state is State.MATCHING:
                self._match(event)
                return
        if not cand and event.kind is not Marker.NEXT:
            return
        cand.append(event.kind)
        if (event.kind is Marker.STEP and self._ref is not None
                and tuple(cand) == self._ref):
            self._close_candidate(tuple(cand), event.ts)
            self._candidate = []

    def _close_candidate(self, cand: tuple[Marker, ...], ts: int):
        if cand == self._ref:
            self.model.confirmed_count += 1
        else:
            self._ref = cand
            self.model.confirmed_count = 1
        if self.model.confirmed_count >= self.config.learn_repeats:
            self.model.sequence = cand
            self.model.unmatched_events = 0
            self._pos = 0
            self._match_start = None
            self._enter(State.MATCHING, ts)

    def _match(self, event: MarkerEvent) -> Trigger | None:
        seq = self.model.sequence
        self.model.unmatched_events += 1
        if event.kind is seq[self._pos]:
            if self._pos == 0:
                self._match_start = event.ts
            self._pos += 1
        elif event.kind is seq[0]:
            self._pos = 1
            self._match_start = event.ts
        else:
            self._pos = 0
            self._match_start = None

        if self._pos == len(seq):
            duration = event.ts - self._match_start
            self._pos = 0
            self._match_start = None
            self.model.unmatched_events = 0
            return self._record(duration, event.ts)

        if self.model.unmatched_events >= self.config.relearn_after:
            self._relearn(event.ts)
        return None

    def _record(self, duration: int, ts: int) -> Trigger | None:
        m = self.model
        m.recent_durations.append(duration)
        if m.recent_min is None or duration < m.recent_min:
            m.recent_min = duration
        if len(m.recent_durations) < self.config.window:
            return None
        mean = sum(m.recent_durations) / len(m.recent_durations)
        if mean > (1.0 + self.config.slowdown_fraction) * m.recent_min:
            return self._fire("Slowdown", ts, (mean, m.recent_min))
        return None

    def tick(self, now: int) -> Trigger | None:
        if self.state is not State.MATCHING or not self.model.recent_durations:
            return None
        if self._pos == 0 or self.last_ts is None or not self._blocked_armed:
            return None
        mean = self.mean_duration()
        gap = now - self.last_ts
        if gap >= self.config.blocked_multiplier * mean:
            self._blocked_armed = False
            return self._fire("Blocked", now, (gap, mean))
        return None

    def run(self, events: Iterable[MarkerEvent | Tick],
            tick_every: int | None = None) -> list[Trigger]:
        """Feed a whole stream; optionally probe ``tick`` at a fixed period between markers."""
        out = []
        for ev in events:
            if isinstance(ev, Tick):
                trig = self.tick(ev.ts)
                if trig:
                    out.append(trig)
                continue
            if tick_every and self.last_ts is not None:
                t = self.last_ts + tick_every
                while t < ev.ts:
                    trig = self.tick(t)
                    if trig:
                        out.append(trig)
                    t += tick_every
            trig = self.feed(ev)
            if trig:
                out.append(trig)
        return out


def parse_marker_lines(lines: Iterable[str],
                       source: str = "<stream>") -> Iterator[MarkerEvent | Tick]:
    """Markers from line-delimited records: {"k":"next"|"step","ts":int}.

    {"t":"tick","ts":int} records become clock probes. Trace event records are
    accepted too; they map to markers by function name.
    """
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"not valid JSON ({exc.msg})", lineno, source) from None
        if not isinstance(rec, dict):
            raise MalformedRecord("record is not an object", lineno, source)
        if rec.get("t") == "ev":
            kind = marker_for_name(rec.get("n", ""))
            if kind is not None:
                yield MarkerEvent(kind, int(rec["s"]))
            continue
        if rec.get("t") in ("hdr", "hw"):
            continue
        if rec.get("t") == "tick":
            try:
                yield Tick(int(rec["ts"]))
            except (KeyError, ValueError, TypeError):
                raise MalformedRecord("tick record needs an integer ts", lineno, source) from None
            continue
        try:
            yield MarkerEvent(Marker(rec["k"]), int(rec["ts"]))
        except (KeyError, ValueError, TypeError):
            raise MalformedRecord("expected {\"k\": \"next\"|\"step\", \"ts\": int}",
                                  lineno, source) from None


def marker_for_name(name: str) -> Marker | None:
    low = name.lower()
    if low.endswith("__next__") or "dataloader.next" in low or low == "next":
        return Marker.NEXT
    if low.endswith("optimizer.step") or low == "step":
        return Marker.STEP
    return None
