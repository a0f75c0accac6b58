"""Exception hierarchy shared by all simulator modules."""

from __future__ import annotations


class SimError(Exception):
    """Base class for every error raised by hybridsim."""


class SpecError(SimError, ValueError):
    """A model/cluster/strategy document or value is invalid.

    ``path`` is a dotted field path (``model.layers[3].param_bytes``) when the
    error can be attributed to a specific field.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        self.message = message
        super().__init__(message, path)

    def __str__(self):
        return f"{self.path}: {self.message}" if self.path else self.message


class ShardingError(SimError, ValueError):
    pass


class ScheduleError(SimError):
    pass


class UnresolvedEventError(SimError, LookupError):
    def __init__(self, key: str, detail: str = ""):
        self.key = key
        self.detail = detail
        super().__init__(key, detail)

    def __str__(self):
        msg = f"unresolved event {self.key}"
        return f"{msg} ({self.detail})" if self.detail else msg


class DeadlockError(SimError):
    def __init__(self, blocked):
        self.blocked = list(blocked)
        super().__init__(self.blocked)

    def __str__(self):
        return "pipeline deadlock, blocked stages: " + ", ".join(map(str, self.blocked))


class InvariantError(SimError):
    """An internal invariant of a constructed object does not hold."""


class CandidateError(SimError):
    """A search candidate failed to simulate; wraps the original error."""

    def __init__(self, candidate: str, cause: Exception):
        self.candidate = candidate
        self.cause = cause
        super().__init__(candidate, cause)

    def __str__(self):
        return f"candidate {self.candidate}: {self.cause}"
