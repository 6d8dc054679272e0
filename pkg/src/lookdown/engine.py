"""The lookdown particle system on finitely many levels.

The state is ``(zeta, R, G)``: total mass, genealogical distance matrix and
type vector over levels ``1..n``. It evolves through

* neutral arrows ``(i, j)``: level ``j`` becomes a copy of level ``i`` and
  levels above ``j`` move up by one (the top level is dropped);
* potential atoms, which act only if their activation level ``z`` lies below
  a state-dependent threshold; an active atom at level ``j`` copies a parent
  level ``k`` drawn by the quantile map from its sampling seed ``w``;
* continuous growth ``dR(i, j) = 2 zeta ds`` off the diagonal,

and stops the first time ``zeta`` leaves ``(1/M, M)``.

The functions ``apply_neutral_event``, ``activation_check``,
``sample_individual``, ``apply_potential_event`` and ``grow_distances`` act
on ``LookdownState`` objects with plain numpy and serve as the reference
semantics. ``advance`` runs the compiled loop in ``_kernels``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import _kernels as K
from . import rng as _rng
from .errors import ArgumentError, InvariantViolation
from .events import (BETA, DELTA, LAMBDA, EventSource, EventStream, NeutralAtom,
                     PotentialAtom, rate_cap)

A = 0
B = 1
TYPE_NAMES = ("A", "B")
STOP_NAMES = {K.STOP_NONE: None, K.STOP_LOWER: "hit_lower", K.STOP_UPPER: "hit_upper"}
STOP_CODES = {v: k for k, v in STOP_NAMES.items()}


@dataclass
class LookdownState:
    s: float
    zeta: float
    R: np.ndarray
    G: np.ndarray
    t_accum: float = 0.0
    stop: str | None = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.G = np.asarray(self.G, dtype=np.int64)
        n = len(self.G)
        if self.R.shape != (n, n):
            raise ArgumentError(f"R must be {n}x{n}, got {self.R.shape}")
        if self.stop not in STOP_CODES:
            raise ArgumentError(f"unknown stop status {self.stop!r}")

    @property
    def n(self) -> int:
        return len(self.G)

    @property
    def muA(self) -> float:
        return float(np.count_nonzero(self.G == A)) / self.n

    def copy(self) -> "LookdownState":
        return LookdownState(self.s, self.zeta, self.R.copy(), self.G.copy(), self.t_accum, self.stop)

    def to_json_dict(self, type_names: Sequence[str] = TYPE_NAMES) -> dict:
        iu = np.triu_indices(self.n, 1)
        return {
            "s": float(self.s),
            "zeta": float(self.zeta),
            "t": float(self.t_accum),
            "stop": self.stop,
            "G": [type_names[g] for g in self.G],
            "R": [float(x) for x in self.R[iu]],
        }

    @classmethod
    def from_json_dict(cls, d: dict, type_names: Sequence[str] = TYPE_NAMES) -> "LookdownState":
        n = len(d["G"])
        R = np.zeros((n, n))
        R[np.triu_indices(n, 1)] = d["R"]
        R = R + R.T
        G = [type_names.index(g) for g in d["G"]]
        return cls(d["s"], d["zeta"], R, G, d.get("t", 0.0), d.get("stop"))


# ---- configuration ----------------------------------------------------------

@dataclass
class RunConfig:
    """Parameters of one lookdown run (shared by all replicas).

    ``init_types`` is ``"iid"`` (each level A with probability ``muA0``),
    ``"exact"`` (``round(n muA0)`` levels of type A at exchangeable
    positions) or an explicit list of type labels. Exactly one of
    ``horizon_s`` and ``horizon_t`` sets the clock of the run.
    """

    n_levels: int
    b: float = 0.0
    c: float = 0.0
    M: float = 10.0
    dt_s: float = 1e-3
    horizon_s: float | None = None
    horizon_t: float | None = None
    seed: int = 0
    v0: float = 1.0
    init_types: str | list = "iid"
    muA0: float = 0.5
    init_probs: list | None = None
    R0: list | None = None
    noise: bool = True
    track_R: bool = True
    window_s: float = 0.1
    cap_C: float | None = None
    check_ultrametric: bool = False

    def validate(self) -> "RunConfig":
        if int(self.n_levels) < 1:
            raise ArgumentError("n_levels must be >= 1")
        if not self.M > 1:
            raise ArgumentError("M must exceed 1")
        if not 1.0 / self.M < self.v0 < self.M:
            raise ArgumentError("v0 must lie strictly inside (1/M, M)")
        if self.b < 0 or self.c < 0:
            raise ArgumentError("b and c must be nonnegative")
        if not self.dt_s > 0:
            raise ArgumentError("dt_s must be positive")
        if (self.horizon_s is None) == (self.horizon_t is None):
            raise ArgumentError("exactly one of horizon_s and horizon_t must be set")
        h = self.horizon_s if self.horizon_s is not None else self.horizon_t
        if h < 0:
            raise ArgumentError("horizon must be nonnegative")
        if not 0.0 <= self.muA0 <= 1.0:
            raise ArgumentError("muA0 must lie in [0, 1]")
        if not self.window_s > 0:
            raise ArgumentError("window_s must be positive")
        if self.cap_C is not None and self.cap_C < 0:
            raise ArgumentError("cap_C must be nonnegative")
        if isinstance(self.init_types, str):
            if self.init_types not in ("iid", "exact"):
                raise ArgumentError(f"unknown init_types {self.init_types!r}")
        elif len(self.init_types) != self.n_levels:
            raise ArgumentError("explicit init_types must have n_levels entries")
        if self.R0 is not None:
            from .genealogy import check_ultrametric
            R0 = np.asarray(self.R0, float)
            if R0.shape != (self.n_levels, self.n_levels):
                raise ArgumentError("R0 has the wrong shape")
            rep = check_ultrametric(R0)
            if not rep.passed:
                raise ArgumentError(f"R0 is not ultrametric at {rep.worst}")
        return self

    @property
    def clock(self) -> str:
        return "s" if self.horizon_s is not None else "t"

    @property
    def horizon(self) -> float:
        return float(self.horizon_s if self.horizon_s is not None else self.horizon_t)

    def window_steps(self) -> int:
        return max(1, int(round(self.window_s / self.dt_s)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    def initial_state(self, replica: int = 0, type_names: Sequence[str] = TYPE_NAMES) -> LookdownState:
        n = int(self.n_levels)
        if isinstance(self.init_types, str):
            u = _rng.substream(self.seed, replica, _rng.INIT).random(n)
            if self.init_probs is not None:
                cum = np.cumsum(np.asarray(self.init_probs, float))
                G = np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)
            elif self.init_types == "iid":
                G = np.where(u < self.muA0, A, B)
            else:
                nA = int(round(n * self.muA0))
                G = np.full(n, B)
                G[np.argsort(u, kind="stable")[:nA]] = A
        else:
            G = np.array([type_names.index(g) if isinstance(g, str) else int(g)
                          for g in self.init_types])
        R = np.zeros((n, n)) if self.R0 is None else np.asarray(self.R0, float).copy()
        return LookdownState(0.0, float(self.v0), R, G)


# ---- reference operations -----------------------------------------------------

def _check_level(level, n, name="level"):
    if not 1 <= level <= n:
        raise ArgumentError(f"{name} {level} outside 1..{n}")


def neutral_source_map(n: int, i: int, j: int) -> np.ndarray:
    """0-based source level of each level after the arrow (i, j)."""
    src = np.arange(n)
    src[j - 1] = i - 1
    src[j:] = np.arange(j - 1, n - 1)
    return src


def apply_neutral_event(state: LookdownState, i: int, j: int) -> LookdownState:
    """Level j becomes a copy of level i; levels above j shift up by one."""
    n = state.n
    if not (1 <= i < j <= n):
        raise ArgumentError(f"neutral event needs 1 <= i < j <= n, got ({i}, {j})")
    src = neutral_source_map(n, i, j)
    R = state.R[np.ix_(src, src)]
    same = src[:, None] == src[None, :]
    R[same] = 0.0
    out = state.copy()
    out.R = R
    out.G = state.G[src]
    return out


def activation_check(state: LookdownState, atom: PotentialAtom, b: float, c: float) -> bool:
    """Whether the atom acts on the state (thresholds at the current state)."""
    _check_level(atom.level, state.n)
    mu = state.muA
    v = state.zeta
    if atom.mark == "beta":
        return atom.z <= b * mu * v
    if atom.mark == "delta":
        opp = (1.0 - mu) if state.G[atom.level - 1] == A else mu
        return atom.z <= c * opp * v * v
    raise ArgumentError("the two-type engine has no lambda atoms")


def sample_individual(state: LookdownState, w: float, condition_on_A: bool) -> int:
    """1-based level at quantile ``w`` of all levels or of the A-levels."""
    if not 0.0 <= w <= 1.0:
        raise ArgumentError("w must lie in [0, 1]")
    if condition_on_A:
        eligible = np.flatnonzero(state.G == A)
        if len(eligible) == 0:
            raise InvariantViolation("no A-level to sample from")
    else:
        eligible = np.arange(state.n)
    r = int(K.rank_of(float(w), len(eligible)))
    return int(eligible[r - 1]) + 1


def replace_level(state: LookdownState, level: int, parent: int) -> LookdownState:
    """Level ``level`` becomes a copy of ``parent`` (1-based)."""
    j, k = level - 1, parent - 1
    out = state.copy()
    if j == k:
        return out
    out.R[j, :] = state.R[k, :]
    out.R[:, j] = state.R[:, k]
    out.R[j, k] = out.R[k, j] = 0.0
    out.R[j, j] = 0.0
    out.G[j] = state.G[k]
    return out


def apply_potential_event(state: LookdownState, atom: PotentialAtom, b: float, c: float,
                          parent: int | None = None) -> tuple[LookdownState, bool]:
    """Apply an atom if active. ``parent`` forces the sampled level (testing)."""
    if not activation_check(state, atom, b, c):
        return state.copy(), False
    if parent is None:
        parent = sample_individual(state, atom.w, condition_on_A=atom.mark == "beta")
    return replace_level(state, atom.level, parent), True


def grow_distances(state: LookdownState, dt_s: float, zeta_path=None) -> LookdownState:
    """Add ``2 int zeta ds`` off the diagonal and ``int zeta ds`` to the clock.

    ``zeta_path`` optionally gives zeta at equally spaced substeps over the
    step (trapezoidal rule); otherwise zeta is held at ``state.zeta``.
    """
    if not dt_s > 0:
        raise ArgumentError("dt_s must be positive")
    if zeta_path is None:
        integral = state.zeta * dt_s
    else:
        zp = np.asarray(zeta_path, float)
        h = dt_s / (len(zp) - 1)
        integral = float(h * (zp.sum() - 0.5 * (zp[0] + zp[-1])))
    out = state.copy()
    out.R = state.R + 2.0 * integral
    np.fill_diagonal(out.R, 0.0)
    out.t_accum = state.t_accum + integral
    out.s = state.s + dt_s
    return out


def project_masses(state: LookdownState) -> tuple[float, float]:
    mu = state.muA
    return state.zeta * mu, state.zeta * (1.0 - mu)


# ---- compiled driver --------------------------------------------------------

@dataclass
class Trajectory:
    """Outputs of one replica at the requested times.

    ``stop`` holds codes 0 (running), 1 (hit 1/M), 2 (hit M). After a stop
    every later output repeats the stopped state. ``int_xiA``, ``int_xiB`` and
    ``int_xiAxiB`` are the original-clock integrals of xi_A, xi_B and
    xi_A xi_B up to each output.
    """

    clock: str
    times: np.ndarray
    s: np.ndarray
    t: np.ndarray
    zeta: np.ndarray
    muA: np.ndarray
    stop: np.ndarray
    int_xiA: np.ndarray
    int_xiB: np.ndarray
    int_xiAxiB: np.ndarray
    final: LookdownState
    states: list | None = None
    checks: int = 0
    check_failures: int = 0
    applied_events: int = 0
    path: np.ndarray | None = None

    @property
    def xiA(self):
        return self.zeta * self.muA

    @property
    def xiB(self):
        return self.zeta * (1.0 - self.muA)

    def stop_names(self):
        return [STOP_NAMES[int(c)] for c in self.stop]


@dataclass
class _Rules:
    mode: int
    b: float = 0.0
    c: float = 0.0
    bvec: np.ndarray = field(default_factory=lambda: np.zeros(1))
    cmat: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    ell: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    n_types: int = 2
    cap: float = 0.0
    marks: tuple = ()


def _twotype_rules(config: RunConfig) -> _Rules:
    marks = tuple(m for m, on in (("beta", config.b > 0), ("delta", config.c > 0)) if on)
    cap = rate_cap(config.b, config.c, config.M) if config.cap_C is None else float(config.cap_C)
    if not marks:
        cap = 0.0
    return _Rules(K.MODE_TWOTYPE, float(config.b), float(config.c), cap=cap, marks=marks)


def _drive(rules: _Rules, state: LookdownState, config: RunConfig, events: EventStream | None,
           replica: int, output_times, record_states: bool, record_path: bool,
           type_names=TYPE_NAMES) -> Trajectory:
    config.validate()
    if state.stop is not None:
        raise ArgumentError("cannot advance a stopped state")
    n = state.n
    if n != config.n_levels:
        raise ArgumentError("state and config disagree on n_levels")
    if np.any(state.G < 0) or np.any(state.G >= rules.n_types):
        raise ArgumentError("type vector holds unknown type codes")
    clock = config.clock
    horizon = config.horizon
    if output_times is None:
        output_times = [horizon]
    out_times = np.asarray(output_times, float)
    if out_times.ndim != 1 or np.any(np.diff(out_times) < 0):
        raise ArgumentError("output times must be a nondecreasing 1-d sequence")
    if len(out_times) and out_times[-1] > horizon * (1 + 1e-12):
        raise ArgumentError("output times beyond the horizon")
    if clock == "s" and len(out_times) and out_times[0] < state.s:
        raise ArgumentError("output times before the state's clock")
    base = float(state.s)
    if events is not None:
        if events.n_levels != n:
            raise ArgumentError("event stream has the wrong number of levels")
        if clock == "s" and events.horizon < horizon:
            raise ArgumentError("event stream horizon shorter than the requested horizon")
        if events.start > state.s:
            raise ArgumentError("event stream starts after the state")
        source = None
    else:
        source = EventSource(n, config.seed, replica, cap_C=rules.cap,
                             marks=rules.marks if rules.cap > 0 else ("beta",), start=base)

    dt = float(config.dt_s)
    Ksteps = config.window_steps()
    s_limit = horizon if clock == "s" else base + config.M * horizon + 1.0
    if events is not None and clock == "t":
        s_limit = min(s_limit, events.horizon)

    sf = np.zeros(8)
    sf[0], sf[1], sf[2], sf[3] = base, state.zeta, 0.0, state.t_accum
    si = np.zeros(8, np.int64)
    G = state.G.astype(np.int64).copy()
    counts = np.bincount(G, minlength=rules.n_types).astype(np.int64)
    track_R = bool(config.track_R)
    if track_R:
        Rt = state.R.astype(np.float64).copy() - 2.0 * state.t_accum
    else:
        Rt = np.zeros((1, 1))
    slot = np.arange(n, dtype=np.int64)
    n_out = len(out_times)
    out = np.zeros((n_out, 8))
    out_G = np.zeros((n_out if record_states else 0, n), np.int64)
    out_R = np.zeros((n_out if record_states and track_R else 0, n, n))
    ito = 0.5 if config.noise else 0.0
    wgen = _rng.substream(config.seed, replica, _rng.BROWNIAN)
    bgen = _rng.substream(config.seed, replica, _rng.BRIDGE)
    sq = math.sqrt(dt)
    w_last = 0.0
    paths = []
    k0 = 0
    while True:
        s0 = base + k0 * dt
        s1 = base + (k0 + Ksteps) * dt
        s1 = min(s1, s_limit)
        if source is not None:
            ev = source.window(s0, s1)
        else:
            lo = np.searchsorted(events.time, s0, side="left")
            hi = np.searchsorted(events.time, s1, side="left")
            ev = EventStream(events.time[lo:hi], events.kind[lo:hi], events.a[lo:hi],
                             events.b[lo:hi], events.z[lo:hi], events.w[lo:hi],
                             horizon=s1, n_levels=n)
        wg = np.empty(Ksteps + 1)
        wg[0] = w_last
        if config.noise:
            wg[1:] = w_last + np.cumsum(wgen.standard_normal(Ksteps) * sq)
        else:
            wg[1:] = 0.0
        nb = len(ev) + K.LAND_ITERS * n_out + 4
        bridge = bgen.standard_normal(nb) if config.noise else np.zeros(nb)
        path = np.zeros((Ksteps + 2 * len(ev) + n_out + 4, 5) if record_path else (0, 5))
        si[2] = 0
        si[5] = 0
        err = K.run_window(rules.mode, sf, si, Rt, slot, G, counts,
                           ev.time, ev.kind, ev.a, ev.b, ev.z, ev.w,
                           wg, k0, base, dt, s1, bridge,
                           rules.b, rules.c, rules.bvec, rules.cmat, rules.ell,
                           float(config.M), ito, track_R, bool(config.check_ultrametric),
                           out_times, 0 if clock == "s" else 1, out, out_G, out_R,
                           bool(record_states), path, bool(record_path))
        if err != K.OK:
            raise InvariantViolation(f"kernel buffer overflow (code {err})")
        if record_path:
            paths.append(path[: si[5]].copy())
        w_last = wg[-1]
        k0 += Ksteps
        if si[0] != K.STOP_NONE or si[7] >= n_out and clock == "t":
            break
        if sf[0] >= s_limit:
            break
    if si[7] < n_out:
        if si[0] == K.STOP_NONE and clock == "t":
            raise ArgumentError("event stream ended before the requested t-horizon")
        for o in range(si[7], n_out):
            K._record_out(out, out_G, out_R, bool(record_states), o, sf, si, G, counts, Rt, slot, n)
    final = _materialize(sf, si, Rt, slot, G, track_R)
    states = None
    if record_states:
        states = []
        for o in range(n_out):
            Ro = out_R[o] if track_R else np.zeros((n, n))
            states.append(LookdownState(out[o, K.O_S], out[o, K.O_ZETA], Ro, out_G[o].copy(),
                                        out[o, K.O_T], STOP_NAMES[int(out[o, K.O_STOP])]))
    return Trajectory(
        clock=clock, times=out_times, s=out[:, K.O_S].copy(), t=out[:, K.O_T].copy(),
        zeta=out[:, K.O_ZETA].copy(), muA=out[:, K.O_MU].copy(),
        stop=out[:, K.O_STOP].astype(np.int64), int_xiA=out[:, K.O_IA].copy(),
        int_xiB=out[:, K.O_IB].copy(), int_xiAxiB=out[:, K.O_IAB].copy(), final=final,
        states=states, checks=int(si[3]), check_failures=int(si[4]),
        applied_events=int(si[6]),
        path=np.concatenate(paths) if record_path else None,
    )


def _materialize(sf, si, Rt, slot, G, track_R) -> LookdownState:
    n = len(G)
    t = sf[3]
    if track_R:
        R = Rt[np.ix_(slot, slot)] + 2.0 * t
        np.fill_diagonal(R, 0.0)
    else:
        R = np.zeros((n, n))
    return LookdownState(sf[0], sf[1], R, G.copy(), t, STOP_NAMES[int(si[0])])


def advance(state: LookdownState, config: RunConfig, events: EventStream | None = None, *,
            replica: int = 0, output_times=None, record_states: bool = False,
            record_path: bool = False) -> Trajectory:
    """Evolve ``state`` to the configured horizon.

    Without ``events`` the replica's own lazily generated streams are used
    (seeded by ``config.seed`` and ``replica``). Output times are on the
    clock of the configured horizon; ``t``-clock outputs are recorded the
    first time the accumulated ``t(s)`` reaches them.
    """
    return _drive(_twotype_rules(config), state, config, events, replica, output_times,
                  record_states, record_path)


def run_replicas(config: RunConfig, replicas: Sequence[int] | int, output_times=None,
                 record_states: bool = False) -> list[Trajectory]:
    if isinstance(replicas, int):
        replicas = range(replicas)
    return [advance(config.initial_state(r), config, replica=r, output_times=output_times,
                    record_states=record_states) for r in replicas]
