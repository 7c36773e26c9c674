"""Exception hierarchy shared by all modules.

Each class carries the CLI exit status it maps to.
"""
from __future__ import annotations


class SepstreamError(Exception):
    exit_code = 1

    def __init__(self, message: str, *, step: int | None = None):
        super().__init__(message)
        self.step = step

    def __str__(self) -> str:
        msg = super().__str__()
        if self.step is not None:
            return f"{msg} (step {self.step})"
        return msg


class ConfigError(SepstreamError):
    """Invalid configuration. ``problems`` lists every failed check."""

    exit_code = 2

    def __init__(self, message: str, problems: list[str] | None = None):
        super().__init__(message)
        self.problems = list(problems or [])


class IntegrityError(SepstreamError):
    exit_code = 3


class FrameError(IntegrityError):
    """A step frame is malformed (mismatched arrays, bad directory)."""


class FormatError(IntegrityError):
    """A file does not carry the expected magic or version."""


class ProtocolError(IntegrityError):
    """An API was driven out of order (begin without end, step regression)."""


class RoutingError(IntegrityError):
    """A record was delivered to a shard that does not own its id."""


class MergeError(IntegrityError):
    """Trajectory blocks cannot be merged into one dataset."""


class StageTimeout(SepstreamError, TimeoutError):
    """No frame became visible within the reader's timeout."""
