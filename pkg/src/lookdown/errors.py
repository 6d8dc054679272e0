"""Exception types shared by the package."""

from __future__ import annotations


class ArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class RangeError(ValueError):
    """A query falls outside the covered time range."""


class InvariantViolation(RuntimeError):
    """Internal state broke a structural invariant."""


class SchemaError(ValueError):
    """A configuration file has missing, unknown or malformed keys."""

    def __init__(self, keys, message="invalid configuration"):
        self.keys = sorted(keys)
        super().__init__(f"{message}: {', '.join(self.keys)}")
