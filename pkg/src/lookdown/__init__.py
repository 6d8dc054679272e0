"""Lookdown simulation of a two-type branching diffusion with selection and competition."""

from __future__ import annotations

from .engine import LookdownState, RunConfig, Trajectory, advance, run_replicas
from .errors import ArgumentError, InvariantViolation, RangeError, SchemaError
from .events import EventSource, EventStream, NeutralAtom, PotentialAtom
from .multitype import MultitypeModel, advance_multitype

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "EventSource", "EventStream", "InvariantViolation", "LookdownState",
    "MultitypeModel", "NeutralAtom", "PotentialAtom", "RangeError", "RunConfig", "SchemaError",
    "Trajectory", "advance", "advance_multitype", "run_replicas",
]
