"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class DiffprofError(Exception):
    exit_code = 5


class InputMissing(DiffprofError):
    exit_code = 2


class MalformedRecord(DiffprofError):
    """A trace or pattern line could not be parsed."""

    exit_code = 3

    def __init__(self, reason: str, line: int | None = None, path: str | None = None):
        self.reason = reason
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {reason}" if where else reason)


class InvariantViolation(MalformedRecord):
    """A record parsed but broke a data-model invariant (end <= start, value outside [0, 1], ...)."""


class EmptyTrace(DiffprofError):
    exit_code = 4


class NoWorkers(DiffprofError):
    exit_code = 4


class DuplicateWorker(DiffprofError):
    exit_code = 3


class EmptySession(DiffprofError):
    exit_code = 4


class OutOfOrderEvent(DiffprofError):
    exit_code = 3


class NonPositiveIterationTime(DiffprofError):
    exit_code = 2


class MissedWindow(DiffprofError):
    """A daemon saw the profiling plan only after its start iteration had passed."""

    exit_code = 5

    def __init__(self, rank: int, current_iteration: int, start_iteration: int):
        self.rank = rank
        self.current_iteration = current_iteration
        self.start_iteration = start_iteration
        super().__init__(
            f"worker {rank} first observed plan at iteration {current_iteration} "
            f">= start {start_iteration}"
        )


class CoordinatorTimeout(DiffprofError):
    exit_code = 5


class SpecInvalid(DiffprofError):
    exit_code = 3
