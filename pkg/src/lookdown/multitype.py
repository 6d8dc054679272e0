"""Finite-type extension: type-dependent fecundity, competition and mutation.

Potential atoms come in three marks. At a level of type ``h``, with ``mu``
the empirical type distribution and ``v`` the mass:

* ``beta`` acts if ``z <= v * mean_k b(G(k))``; the parent is drawn with
  weights ``b(G(k))`` (size-biased);
* ``delta`` acts if ``z <= v^2 * c(h, mu)``; the parent is uniform;
* ``lambda`` acts if ``z <= v``; the type becomes the ``w``-quantile of
  ``ell(h, .)`` and distances are left untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .engine import (LookdownState, RunConfig, Trajectory, _drive, _Rules)
from .errors import ArgumentError, SchemaError
from .events import MARK_CODES, rate_cap


@dataclass
class MultitypeModel:
    types: list
    b: dict
    c: dict
    ell: dict | None = None
    mutation: bool | None = None

    def __post_init__(self):
        self.types = [str(t) for t in self.types]
        if self.mutation is None:
            self.mutation = self.ell is not None
        self.validate()

    def validate(self):
        T = self.types
        if not T or len(set(T)) != len(T):
            raise ArgumentError("types must be a nonempty list of distinct names")
        if set(self.b) != set(T):
            raise ArgumentError("b must give a rate for every type")
        if set(self.c) != set(T) or any(set(self.c[h]) != set(T) for h in T):
            raise ArgumentError("c must be a full type-by-type table")
        if self.mutation:
            if self.ell is None or set(self.ell) != set(T) or any(set(self.ell[h]) - set(T) for h in T):
                raise ArgumentError("ell must give a distribution for every type")
            for h in T:
                if abs(sum(self.ell[h].values()) - 1.0) > 1e-12:
                    raise ArgumentError(f"ell({h}, .) must sum to 1")
        if np.any(self.bvec < 0) or np.any(self.cmat < 0) or (self.mutation and np.any(self.ellmat < 0)):
            raise ArgumentError("rates and probabilities must be nonnegative")
        if not (np.all(np.isfinite(self.bvec)) and np.all(np.isfinite(self.cmat))):
            raise ArgumentError("rates must be finite")

    def index(self, h) -> int:
        if isinstance(h, (int, np.integer)):
            if not 0 <= h < len(self.types):
                raise ArgumentError(f"type index {h} out of range")
            return int(h)
        return self.types.index(h)

    @property
    def bvec(self) -> np.ndarray:
        return np.array([float(self.b[h]) for h in self.types])

    @property
    def cmat(self) -> np.ndarray:
        return np.array([[float(self.c[h][g]) for g in self.types] for h in self.types])

    @property
    def ellmat(self) -> np.ndarray:
        if self.ell is None:
            return np.eye(len(self.types))
        return np.array([[float(self.ell[h].get(g, 0.0)) for g in self.types] for h in self.types])

    def marks(self) -> tuple:
        m = []
        if np.any(self.bvec > 0):
            m.append("beta")
        if np.any(self.cmat > 0):
            m.append("delta")
        if self.mutation:
            m.append("lambda")
        return tuple(m)

    def cap(self, M: float) -> float:
        return rate_cap(float(self.bvec.max()), float(self.cmat.max()), M, bool(self.mutation))

    # ---- serialization
    def to_dict(self) -> dict:
        d = {"types": list(self.types), "b": dict(self.b), "c": {h: dict(self.c[h]) for h in self.types}}
        if self.ell is not None:
            d["ell"] = {h: dict(self.ell[h]) for h in self.types}
        d["mutation"] = bool(self.mutation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MultitypeModel":
        allowed = {"types", "b", "c", "ell", "mutation"}
        unknown = set(d) - allowed
        missing = {"types", "b", "c"} - set(d)
        if unknown or missing:
            raise SchemaError(unknown | missing, "model file has unknown or missing keys")
        return cls(d["types"], d["b"], d["c"], d.get("ell"), d.get("mutation"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, path) -> "MultitypeModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def two_type_embedding(cls, b: float, c: float) -> "MultitypeModel":
        """``b(A) = b``, ``b(B) = 0``, ``c(A,B) = c(B,A) = c``, zero diagonal, no mutation."""
        return cls(["A", "B"], {"A": b, "B": 0.0},
                   {"A": {"A": 0.0, "B": c}, "B": {"A": c, "B": 0.0}}, None, False)


def _codes(G, model):
    return np.array([model.index(g) for g in G], dtype=np.int64)


def q_general(h, G, v: float, z: float, w: float, mark: str, model: MultitypeModel):
    """New type at a level of type ``h`` hit by a potential atom.

    ``h`` and ``G`` may hold type names or indices; the result has the same
    form as ``h``.
    """
    if not v > 0:
        raise ArgumentError("v must be positive")
    if z < 0 or not 0.0 <= w <= 1.0:
        raise ArgumentError("need z >= 0 and w in [0, 1]")
    if mark not in MARK_CODES:
        raise ArgumentError(f"unknown mark {mark!r}")
    hi = model.index(h)
    g = _codes(G, model)
    n = len(g)
    counts = np.bincount(g, minlength=len(model.types)).astype(np.int64)
    kind = MARK_CODES[mark]
    if kind == MARK_CODES["lambda"] and not model.mutation:
        return h
    thr = K.multi_threshold(kind, hi, counts, n, float(v), model.bvec, model.cmat)
    if not (z <= thr and thr > 0):
        return h
    if kind == MARK_CODES["beta"]:
        new = int(g[K.multi_size_biased(float(w), g, model.bvec)])
    elif kind == MARK_CODES["delta"]:
        new = int(g[K.rank_of(float(w), n) - 1])
    else:
        new = int(K.quantile_index(float(w), model.ellmat[hi]))
    return new if isinstance(h, (int, np.integer)) else model.types[new]


def drift_total_mass_general(v: float, G, model: MultitypeModel) -> float:
    """``v * mean_k b(G(k)) - v^2 * mean_k c(G(k), mu)``."""
    if not v > 0:
        raise ArgumentError("v must be positive")
    g = _codes(G, model)
    n = len(g)
    bv, cm = model.bvec, model.cmat
    c_of = cm[g][:, g].mean(axis=1)  # c(G(k), mu)
    return float(v * bv[g].mean() - v * v * c_of.mean())


def _rules(model: MultitypeModel, config: RunConfig) -> _Rules:
    marks = model.marks()
    cap = model.cap(config.M) if config.cap_C is None else float(config.cap_C)
    if model.mutation and cap < config.M:
        raise ArgumentError("cap_C must be at least M when mutation is enabled")
    if not marks:
        cap = 0.0
    ell = model.ellmat.astype(np.float64)
    return _Rules(K.MODE_MULTI, 0.0, 0.0, model.bvec.astype(np.float64),
                  model.cmat.astype(np.float64), ell, len(model.types), cap, marks)


def initial_state(config: RunConfig, model: MultitypeModel, replica: int = 0) -> LookdownState:
    return config.initial_state(replica, type_names=model.types)


def advance_multitype(state: LookdownState, config: RunConfig, model: MultitypeModel,
                      events=None, *, replica: int = 0, output_times=None,
                      record_states: bool = False, record_path: bool = False) -> Trajectory:
    """As ``engine.advance`` with the multitype rules.

    ``Trajectory.muA`` reports the frequency of the first listed type.
    """
    return _drive(_rules(model, config), state, config, events, replica, output_times,
                  record_states, record_path, type_names=model.types)
