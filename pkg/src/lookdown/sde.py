"""Integrators for the total-mass and two-type diffusions and the clock change.

The lookdown clock ``s`` and the original clock ``t`` are related by
``t(s) = int_0^s zeta_u du``. On the ``s`` clock the total mass solves

    d zeta = f(zeta, mu_A) zeta ds + zeta dW,
    f(v, p) = b p v - 2 c p (1 - p) v^2,

which is integrated on the log scale so that positivity is structural. The
original-clock pair ``(xi_A, xi_B)`` is integrated by Euler-Maruyama with
clamping at the absorbing boundary 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import rng as _rng
from .errors import ArgumentError, RangeError


_TINY = 5e-324
_LOG_MAX = math.log(np.finfo(float).max)


def _check_p(muA):
    if not 0.0 <= muA <= 1.0:
        raise ArgumentError(f"muA must lie in [0, 1], got {muA}")


def drift_total_mass(v: float, muA: float, b: float, c: float) -> float:
    _check_p(muA)
    return b * muA * v - 2.0 * c * muA * (1.0 - muA) * v * v


def drift_total_mass_truncated(v: float, muA: float, b: float, c: float, M: float) -> float:
    if not M > 1:
        raise ArgumentError("M must exceed 1")
    return drift_total_mass(min(max(v, 1.0 / M), M), muA, b, c)


def step_log_mass(zeta: float, muA: float, dt_s: float, dW: float, b: float, c: float) -> float:
    """Exponential Euler step of the total mass on the lookdown clock.

    The result is floored at the smallest positive double, so underflow of a
    huge negative exponent still returns a positive mass; overflow raises.
    """
    if not zeta > 0:
        raise ArgumentError("zeta must be positive")
    logz = math.log(zeta) + (drift_total_mass(zeta, muA, b, c) - 0.5) * dt_s + dW
    if logz > _LOG_MAX:
        raise RangeError("total mass overflows a double")
    return max(math.exp(logz), _TINY)


# ---- original clock ---------------------------------------------------------

@dataclass
class DirectPath:
    times_t: np.ndarray
    xiA: np.ndarray
    xiB: np.ndarray


@njit(cache=True)
def _euler_path(xA, xB, b, c, dt, noise, outA, outB):
    sq = math.sqrt(dt)
    outA[0] = xA
    outB[0] = xB
    for k in range(noise.shape[0]):
        if xA > 0.0:
            nA = xA + (b * xA - c * xA * xB) * dt + math.sqrt(xA) * sq * noise[k, 0]
        else:
            nA = 0.0
        if xB > 0.0:
            nB = xB - c * xA * xB * dt + math.sqrt(xB) * sq * noise[k, 1]
        else:
            nB = 0.0
        xA = nA if nA > 0.0 else 0.0
        xB = nB if nB > 0.0 else 0.0
        outA[k + 1] = xA
        outB[k + 1] = xB


@njit(cache=True)
def _euler_summary(xA, xB, b, c, dt, noise, out_idx, res, hits, ints):
    """Euler run recording only what ensemble statistics need.

    res[o] = (xiA, xiB) at grid index out_idx[o]; hits = first grid index at
    which each component is 0 (-1 if never); ints[o] = (int xiA dt,
    int drift_A dt, int xiB dt, int drift_B dt) up to out_idx[o], left-point sums.
    """
    sq = math.sqrt(dt)
    iA = 0.0
    dA = 0.0
    iB = 0.0
    dB = 0.0
    o = 0
    n_out = out_idx.shape[0]
    hits[0] = -1
    hits[1] = -1
    if xA <= 0.0:
        hits[0] = 0
    if xB <= 0.0:
        hits[1] = 0
    K = noise.shape[0]
    for k in range(K + 1):
        while o < n_out and out_idx[o] == k:
            res[o, 0] = xA
            res[o, 1] = xB
            ints[o, 0] = iA
            ints[o, 1] = dA
            ints[o, 2] = iB
            ints[o, 3] = dB
            o += 1
        if k == K:
            break
        fA = b * xA - c * xA * xB
        fB = -c * xA * xB
        iA += xA * dt
        dA += fA * dt
        iB += xB * dt
        dB += fB * dt
        nA = xA + fA * dt + math.sqrt(xA) * sq * noise[k, 0] if xA > 0.0 else 0.0
        nB = xB + fB * dt + math.sqrt(xB) * sq * noise[k, 1] if xB > 0.0 else 0.0
        xA = nA if nA > 0.0 else 0.0
        xB = nB if nB > 0.0 else 0.0
        if xA == 0.0 and hits[0] < 0:
            hits[0] = k + 1
        if xB == 0.0 and hits[1] < 0:
            hits[1] = k + 1


def _validate_direct(xA0, xB0, dt_t, T):
    if xA0 < 0 or xB0 < 0:
        raise ArgumentError("initial masses must be nonnegative")
    if not dt_t > 0:
        raise ArgumentError("dt_t must be positive")
    if T < 0:
        raise ArgumentError("T must be nonnegative")


def _n_steps(T, dt):
    return int(round(T / dt))


def _noise(seed, replica, K, noise):
    if not noise:
        return np.zeros((K, 2))
    return _rng.substream(seed, replica, _rng.DIRECT).standard_normal((K, 2))


def simulate_direct(xA0: float, xB0: float, b: float, c: float, dt_t: float, T: float,
                    rng_seed: int, replica: int = 0, noise: bool = True) -> DirectPath:
    """Euler-Maruyama path of the two-type diffusion on the grid ``k dt_t``."""
    _validate_direct(xA0, xB0, dt_t, T)
    K = _n_steps(T, dt_t)
    outA = np.empty(K + 1)
    outB = np.empty(K + 1)
    _euler_path(float(xA0), float(xB0), float(b), float(c), float(dt_t),
                _noise(rng_seed, replica, K, noise), outA, outB)
    return DirectPath(np.arange(K + 1) * dt_t, outA, outB)


@dataclass
class DirectEnsemble:
    """Per-replica summaries of direct runs.

    ``xiA``/``xiB`` have shape (replicas, len(times)). ``int_xiA`` and
    ``int_driftA`` are the running integrals used by the quadratic-variation
    check. Hit times are ``inf`` where the component never reached 0.
    """

    times: np.ndarray
    xiA: np.ndarray
    xiB: np.ndarray
    hitA: np.ndarray
    hitB: np.ndarray
    int_xiA: np.ndarray
    int_driftA: np.ndarray
    int_xiB: np.ndarray
    int_driftB: np.ndarray


def simulate_direct_ensemble(xA0, xB0, b, c, dt_t, times, replicas, rng_seed,
                             first_replica: int = 0, noise: bool = True) -> DirectEnsemble:
    """Independent replicas of ``simulate_direct`` summarized at ``times``.

    Replica ``r`` uses the same increments as ``simulate_direct(..., replica=r)``.
    """
    times = np.atleast_1d(np.asarray(times, float))
    if np.any(np.diff(times) < 0):
        raise ArgumentError("times must be nondecreasing")
    T = float(times[-1]) if len(times) else 0.0
    _validate_direct(xA0, xB0, dt_t, T)
    K = _n_steps(T, dt_t)
    idx = np.rint(times / dt_t).astype(np.int64)
    m = len(times)
    xiA = np.empty((replicas, m))
    xiB = np.empty((replicas, m))
    hit = np.empty((replicas, 2), np.int64)
    ints = np.empty((replicas, m, 4))
    res = np.empty((m, 2))
    h = np.empty(2, np.int64)
    it = np.empty((m, 4))
    for r in range(replicas):
        _euler_summary(float(xA0), float(xB0), float(b), float(c), float(dt_t),
                       _noise(rng_seed, first_replica + r, K, noise), idx, res, h, it)
        xiA[r] = res[:, 0]
        xiB[r] = res[:, 1]
        hit[r] = h
        ints[r] = it
    hit_t = np.where(hit >= 0, hit * dt_t, np.inf)
    return DirectEnsemble(times, xiA, xiB, hit_t[:, 0], hit_t[:, 1],
                          ints[:, :, 0], ints[:, :, 1], ints[:, :, 2], ints[:, :, 3])


# ---- clock change -----------------------------------------------------------

@dataclass
class MassPath:
    times_s: np.ndarray
    zeta: np.ndarray
    times_t: np.ndarray | None = None

    def __post_init__(self):
        self.times_s = np.asarray(self.times_s, float)
        self.zeta = np.asarray(self.zeta, float)
        if self.times_s.shape != self.zeta.shape or self.times_s.ndim != 1:
            raise ArgumentError("times_s and zeta must be 1-d arrays of equal length")
        if len(self.times_s) and np.any(np.diff(self.times_s) <= 0):
            raise ArgumentError("times_s must be strictly increasing")


def time_change(mass: MassPath) -> MassPath:
    """Fill ``times_t`` with the trapezoidal integral of zeta."""
    s, z = mass.times_s, mass.zeta
    tt = np.zeros_like(s)
    if len(s) > 1:
        tt[1:] = np.cumsum(0.5 * (z[1:] + z[:-1]) * np.diff(s))
    return MassPath(s, z, tt)


def invert_time(mass: MassPath, t: float) -> float:
    """The ``s`` with ``t(s) = t``, by linear interpolation of the monotone map."""
    if mass.times_t is None:
        mass = time_change(mass)
    tt = mass.times_t
    if t < 0 or t > tt[-1] * (1 + 1e-15):
        raise RangeError(f"t={t} outside [0, {tt[-1]}]")
    k = int(np.searchsorted(tt, t, side="left"))
    if k == 0:
        return float(mass.times_s[0])
    if k >= len(tt):
        return float(mass.times_s[-1])
    t0, t1 = tt[k - 1], tt[k]
    s0, s1 = mass.times_s[k - 1], mass.times_s[k]
    if t1 == t0:
        return float(s0)
    return float(s0 + (t - t0) / (t1 - t0) * (s1 - s0))
