"""Generator of the lookdown process on product-form test functions.

A test function of degree ``d`` has the form

    F(v, r, g) = f(v, r(i, j) : (i, j) in slots) * gamma(g(1), ..., g(d)),

with slots ``i < j <= d``. ``eval_generator`` sums the seven parts of the
generator (diffusion, mass drift, distance growth, neutral jumps and the
three sampling integrals), where the sampling integrals are exact averages
over the ``n`` simulated levels. All evaluators are vectorized over a
leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from .engine import A, B, RunConfig, advance, neutral_source_map
from .errors import ArgumentError
from . import rng as _rng


# ---- smooth window -----------------------------------------------------------

def _h(x):
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)


def _h1(x):
    xs = np.where(x > 0, x, 1.0)
    return np.where(x > 0, _h(x) / xs**2, 0.0)


def _h2(x):
    xs = np.where(x > 0, x, 1.0)
    return np.where(x > 0, _h(x) * (1.0 / xs**4 - 2.0 / xs**3), 0.0)


def smoothstep(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1, with first two derivatives."""
    x = np.asarray(x, float)
    a, b = _h(x), _h(1.0 - x)
    a1, b1 = _h1(x), -_h1(1.0 - x)
    a2, b2 = _h2(x), _h2(1.0 - x)
    S = a + b
    S = np.where(S > 0, S, 1.0)
    N = a1 * b - a * b1
    N1 = a2 * b - a * b2
    S1 = a1 + b1
    val = a / S
    d1 = N / S**2
    d2 = (N1 * S - 2.0 * N * S1) / S**3
    inside = (x > 0) & (x < 1)
    val = np.where(x >= 1, 1.0, np.where(inside, val, 0.0))
    d1 = np.where(inside, d1, 0.0)
    d2 = np.where(inside, d2, 0.0)
    return val, d1, d2


@dataclass(frozen=True)
class BumpWindow:
    """Smooth window equal to 1 on ``[1/M + w, M - w]`` and 0 outside ``(1/M, M)``."""

    M: float
    width: float | None = None

    @property
    def w(self) -> float:
        return 0.05 * (self.M - 1.0 / self.M) if self.width is None else self.width

    def __call__(self, v):
        return self.derivs(v)[0]

    def derivs(self, v):
        v = np.asarray(v, float)
        w = self.w
        l0, l1, l2 = smoothstep((v - 1.0 / self.M) / w)
        r0, r1, r2 = smoothstep((self.M - v) / w)
        l1, l2 = l1 / w, l2 / w**2
        r1, r2 = -r1 / w, r2 / w**2
        return l0 * r0, l1 * r0 + l0 * r1, l2 * r0 + 2 * l1 * r1 + l0 * r2


# ---- test functions ------------------------------------------------------------

@dataclass
class TestFunction:
    """Product-form test function; ``f*`` take ``(v, r)`` with ``r[..., slot]``."""

    name: str
    degree: int
    slots: tuple
    f: Callable
    f_v: Callable
    f_vv: Callable
    f_r: Callable
    gamma: Callable
    M: float | None = None

    __test__ = False  # not a pytest class

    def __post_init__(self):
        for i, j in self.slots:
            if not 1 <= i < j <= self.degree:
                raise ArgumentError(f"slot ({i}, {j}) must satisfy 1 <= i < j <= degree")

    def slot_values(self, R):
        R = np.asarray(R, float)
        if not self.slots:
            return np.zeros(R.shape[:-2] + (0,))
        ii = np.array([i - 1 for i, _ in self.slots])
        jj = np.array([j - 1 for _, j in self.slots])
        return R[..., ii, jj]

    def __call__(self, v, R, G):
        G = np.asarray(G)
        return self.f(np.asarray(v, float), self.slot_values(R)) * self.gamma(G[..., : self.degree])


def _no_r(fn):
    return lambda v, r: fn(v)


def _zeros_r(v, r):
    return np.zeros(np.broadcast_shapes(np.shape(v) + (0,), np.shape(r)[:-1] + (0,)))


def _one(g):
    return np.ones(np.shape(g)[:-1])


def constant(value: float = 1.0, degree: int = 1) -> TestFunction:
    return TestFunction(f"const({value})", degree, (),
                        lambda v, r: np.full(np.shape(v), value, float),
                        lambda v, r: np.zeros(np.shape(v)),
                        lambda v, r: np.zeros(np.shape(v)),
                        _zeros_r, _one)


def mass_function(phi, dphi, d2phi, name="phi(v)", M=None) -> TestFunction:
    """Degree-1 function of the mass only."""
    return TestFunction(name, 1, (), _no_r(phi), _no_r(dphi), _no_r(d2phi), _zeros_r, _one, M)


def distance_function(psi, dpsi, name="psi(r12)", M=None) -> TestFunction:
    """Degree-2 function of ``r(1, 2)`` only."""
    return TestFunction(name, 2, ((1, 2),),
                        lambda v, r: psi(r[..., 0]) * np.ones(np.shape(v)),
                        lambda v, r: np.zeros(np.broadcast_shapes(np.shape(v), np.shape(r)[:-1])),
                        lambda v, r: np.zeros(np.broadcast_shapes(np.shape(v), np.shape(r)[:-1])),
                        lambda v, r: dpsi(r[..., 0:1]) * np.ones(np.shape(v) + (1,)),
                        _one, M)


def bump_v(M: float, power: int = 1, width: float | None = None) -> TestFunction:
    """``bump(v) * v^power``."""
    W = BumpWindow(M, width)

    def parts(v):
        b0, b1, b2 = W.derivs(v)
        p = power
        m0 = v**p
        m1 = p * v ** (p - 1) if p >= 1 else 0.0 * v
        m2 = p * (p - 1) * v ** (p - 2) if p >= 2 else 0.0 * v
        return b0 * m0, b1 * m0 + b0 * m1, b2 * m0 + 2 * b1 * m1 + b0 * m2

    return mass_function(lambda v: parts(v)[0], lambda v: parts(v)[1], lambda v: parts(v)[2],
                         name=f"bump*v^{power}", M=M)


def bump_tanh_r12(M: float, scale: float = 1.0, width: float | None = None) -> TestFunction:
    """``bump(v) * tanh(r(1,2) / scale)``: a soft cap on the pair distance."""
    W = BumpWindow(M, width)

    def f(v, r):
        return W(v) * np.tanh(r[..., 0] / scale)

    def fv(v, r):
        return W.derivs(v)[1] * np.tanh(r[..., 0] / scale)

    def fvv(v, r):
        return W.derivs(v)[2] * np.tanh(r[..., 0] / scale)

    def fr(v, r):
        return (W(v) / scale / np.cosh(r[..., 0] / scale) ** 2)[..., None]

    return TestFunction("bump*tanh(r12)", 2, ((1, 2),), f, fv, fvv, fr, _one, M)


def bump_indicator(M: float, pattern=(A,), power: int = 0, width: float | None = None) -> TestFunction:
    """``bump(v) * v^power * prod_i 1{g(i) = pattern[i]}``."""
    base = bump_v(M, power, width)
    pattern = tuple(int(p) for p in pattern)
    pat = np.array(pattern)

    def gamma(g):
        return np.all(np.asarray(g) == pat, axis=-1).astype(float)

    label = "".join("AB"[p] for p in pattern)
    return TestFunction(f"bump*v^{power}*1[{label}]", len(pattern), (), base.f, base.f_v,
                        base.f_vv, _zeros_r, gamma, M)


def builtin(name: str, M: float) -> TestFunction:
    table = {
        "bump_v": lambda: bump_v(M, 1),
        "bump_v2": lambda: bump_v(M, 2),
        "bump_tanh_r12": lambda: bump_tanh_r12(M),
        "bump_gA1": lambda: bump_indicator(M, (A,)),
        "bump_v_gA1_gB2": lambda: bump_indicator(M, (A, B), power=1),
        "bump_v2_gA1_gA2": lambda: bump_indicator(M, (A, A), power=2),
        "const": lambda: constant(1.0),
    }
    if name not in table:
        raise ArgumentError(f"unknown test function {name!r}; choose from {sorted(table)}")
    fn = table[name]()
    fn.name = name
    return fn


BUILTINS = ("bump_v", "bump_v2", "bump_tanh_r12", "bump_gA1", "bump_v_gA1_gB2",
            "bump_v2_gA1_gA2", "const")


# ---- generator ---------------------------------------------------------------

def eval_generator_batch(F: TestFunction, v, R, G, b: float, c: float, M: float | None = None):
    """Generator applied to F at a batch of states ``v[N], R[N, n, n], G[N, n]``."""
    v = np.atleast_1d(np.asarray(v, float))
    R = np.asarray(R, float).reshape((len(v),) + np.shape(R)[-2:])
    G = np.asarray(G).reshape((len(v), -1))
    N, n = G.shape
    d = F.degree
    if d > n:
        raise ArgumentError(f"degree {d} exceeds the {n} available levels")
    M = F.M if M is None else M
    r0 = F.slot_values(R)
    g0 = G[:, :d]
    gam0 = F.gamma(g0)
    F0 = F.f(v, r0) * gam0
    muA = np.count_nonzero(G == A, axis=1) / n
    muB = 1.0 - muA

    out = 0.5 * v**2 * F.f_vv(v, r0) * gam0
    out += (b * v**2 * muA - 2.0 * c * v**3 * muA * muB) * F.f_v(v, r0) * gam0
    if F.slots:
        out += 2.0 * v * F.f_r(v, r0).sum(axis=-1) * gam0

    # neutral arrows inside the first d levels
    for j in range(2, d + 1):
        for i in range(1, j):
            src = neutral_source_map(d, i, j)
            Rs = R[:, src[:, None], src[None, :]]
            same = src[:, None] == src[None, :]
            Rs = np.where(same[None], 0.0, Rs)
            out += F(v, Rs, G[:, src]) - F0

    # replacements of level j by level k, k over all n levels
    slot_a = np.array([a - 1 for a, _ in F.slots], int)
    slot_b = np.array([bb - 1 for _, bb in F.slots], int)
    isA = (G == A)
    kk = np.arange(n)
    for j0 in range(d):
        # r'(slot) for every parent k: shape (N, n, nslots)
        rk = np.repeat(r0[:, None, :], n, axis=1)
        for s_idx, (a, bb) in enumerate(zip(slot_a, slot_b)):
            if a == j0:
                rk[:, :, s_idx] = R[:, kk, bb]
            elif bb == j0:
                rk[:, :, s_idx] = R[:, a, kk]
        gk = np.repeat(g0[:, None, :], n, axis=1)
        gk[:, :, j0] = G
        Fk = F.f(v[:, None], rk) * F.gamma(gk)
        diff = Fk - F0[:, None]
        avg_all = diff.sum(axis=1) / n
        avg_A = (diff * isA).sum(axis=1) / n
        gj = G[:, j0]
        out += b * v * avg_A
        out += np.where(gj == B, c * v**2 * muA * avg_all, 0.0)
        out += np.where(gj == A, c * v**2 * muB * avg_all, 0.0)

    if M is not None:
        out = np.where((v > 1.0 / M) & (v < M), out, 0.0)
    return out


def eval_generator(F: TestFunction, v, R, G, b: float, c: float, M: float | None = None) -> float:
    """Generator applied to F at one state."""
    R = np.asarray(R, float)
    G = np.asarray(G)
    return float(eval_generator_batch(F, [v], R[None], G[None], b, c, M)[0])


# ---- residuals -----------------------------------------------------------------

@dataclass
class ResidualReport:
    function_id: str
    delta: float
    replicas: int
    mean: float
    se: float
    s0: float = 0.0
    sigmas: float = 3.0

    @property
    def passed(self) -> bool:
        return abs(self.mean) <= self.sigmas * self.se or (self.se == 0 and self.mean == 0)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "sigmas"}
        d["pass"] = self.passed
        return d


def residual_samples(config: RunConfig, functions, delta_s: float, replicas, s0: float = 0.0,
                     n_sub: int = 101) -> dict:
    """Per-replica compensated increments for each test function.

    Returns ``{name: array}``; each entry is
    ``F(X_{s0+delta}) - F(X_{s0}) - int_{s0}^{s0+delta} A F(X_u) du``
    with the integral by the trapezoidal rule over ``n_sub`` snapshots.
    """
    if not delta_s > 0:
        raise ArgumentError("delta_s must be positive")
    if config.clock != "s" or config.horizon < s0 + delta_s - 1e-12:
        raise ArgumentError("horizon_s shorter than s0 + delta")
    if isinstance(replicas, int):
        replicas = range(replicas)
    grid = np.linspace(s0, s0 + delta_s, n_sub)
    wts = np.full(n_sub, delta_s / (n_sub - 1))
    wts[0] *= 0.5
    wts[-1] *= 0.5
    res = {F.name: [] for F in functions}
    for r in replicas:
        tr = advance(config.initial_state(r), config, replica=r, output_times=grid,
                     record_states=True)
        v = tr.zeta
        R = np.stack([st.R for st in tr.states])
        G = np.stack([st.G for st in tr.states])
        for F in functions:
            Fv = F(v, R, G)
            if F.M is not None:
                Fv = np.where((v > 1 / F.M) & (v < F.M), Fv, 0.0)
            AF = eval_generator_batch(F, v, R, G, config.b, config.c, F.M if F.M else config.M)
            res[F.name].append(Fv[-1] - Fv[0] - float(wts @ AF))
    return {k: np.asarray(x) for k, x in res.items()}


def martingale_residual(config: RunConfig, F: TestFunction, delta_s: float, replicas,
                        s0: float = 0.0, n_sub: int = 101) -> ResidualReport:
    x = residual_samples(config, [F], delta_s, replicas, s0, n_sub)[F.name]
    return _report(F.name, delta_s, x, s0)


def _report(name, delta_s, x, s0):
    nrep = len(x)
    se = float(np.std(x, ddof=1) / np.sqrt(nrep)) if nrep >= 2 else float("nan")
    return ResidualReport(name, float(delta_s), nrep, float(np.mean(x)), se, float(s0))


def permute_levels_first(R, G, levels):
    """Reorder levels so that ``levels`` (0-based) come first, others after."""
    n = len(G)
    rest = np.setdiff1d(np.arange(n), levels, assume_unique=False)
    order = np.concatenate([np.asarray(levels, int), rest])
    return R[np.ix_(order, order)], G[order]


def eval_symmetrized(F: TestFunction, states, k_samples: int, b: float, c: float,
                     rng_seed=0, M: float | None = None):
    """Monte Carlo ``(Phi_F, APhi_F)`` over resampled levels of each state.

    Each resample draws ``F.degree`` distinct levels, moves them to the front
    and evaluates ``F`` and ``A F / v`` on the reordered state.
    """
    if k_samples < 1:
        raise ArgumentError("k_samples must be >= 1")
    gen = _rng.as_generator(rng_seed)
    phi, aphi = [], []
    for st in states:
        n = st.n
        if F.degree > n:
            raise ArgumentError("degree exceeds number of levels")
        Rs, Gs = [], []
        for _ in range(k_samples):
            lv = gen.choice(n, size=F.degree, replace=False)
            Rp, Gp = permute_levels_first(st.R, st.G, lv)
            Rs.append(Rp)
            Gs.append(Gp)
        v = np.full(k_samples, st.zeta)
        Rs = np.stack(Rs)
        Gs = np.stack(Gs)
        phi.append(F(v, Rs, Gs).mean())
        aphi.append((eval_generator_batch(F, v, Rs, Gs, b, c, M) / st.zeta).mean())
    return float(np.mean(phi)), float(np.mean(aphi))
