from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from lookdown.errors import ArgumentError, RangeError
from lookdown.sde import (MassPath, drift_total_mass, drift_total_mass_truncated, invert_time,
                          simulate_direct, simulate_direct_ensemble, step_log_mass, time_change)


def test_drift_examples():
    assert drift_total_mass(2.0, 0.5, 1.0, 1.0) == pytest.approx(-1.0)
    assert drift_total_mass(5.0, 0.0, 3.0, 7.0) == 0.0
    assert drift_total_mass(5.0, 0.3, 0.0, 0.0) == 0.0
    with pytest.raises(ArgumentError):
        drift_total_mass(1.0, 1.2, 1.0, 1.0)


def test_truncated_drift_examples():
    assert drift_total_mass_truncated(1000.0, 0.5, 1.0, 0.0, 10.0) == pytest.approx(5.0)
    assert drift_total_mass_truncated(1e-9, 1.0, 2.0, 0.0, 4.0) == pytest.approx(0.5)
    for v in (0.2, 1.0, 7.5):
        assert drift_total_mass_truncated(v, 0.4, 1.3, 0.7, 10.0) == drift_total_mass(v, 0.4, 1.3, 0.7)


def test_step_log_mass_examples():
    assert step_log_mass(1.0, 0.3, 0.1, 0.05, 0.0, 0.0) == pytest.approx(1.0)
    assert step_log_mass(1.7, 0.3, 0.0, 0.0, 0.5, 0.5) == 1.7
    assert step_log_mass(2.0, 0.5, 0.01, 0.0, 1.0, 0.0) == pytest.approx(2 * math.exp((1 - 0.5) * 0.01))


@settings(max_examples=60, deadline=None)
@given(z=st.floats(1e-6, 1e3), mu=st.floats(0, 1), dt=st.floats(0, 1), dw=st.floats(-5, 5),
       b=st.floats(0, 5), c=st.floats(0, 5))
def test_step_log_mass_positive(z, mu, dt, dw, b, c):
    try:
        out = step_log_mass(z, mu, dt, dw, b, c)
    except RangeError:
        assume(False)
    assert out > 0


def test_direct_trivial_paths():
    p = simulate_direct(0.0, 0.0, 1.0, 1.0, 1e-2, 1.0, 3)
    assert np.all(p.xiA == 0) and np.all(p.xiB == 0)
    p = simulate_direct(1.5, 0.5, 0.0, 0.0, 1e-2, 1.0, 3, noise=False)
    assert np.all(p.xiA == 1.5) and np.all(p.xiB == 0.5)
    with pytest.raises(ArgumentError):
        simulate_direct(-1.0, 0.0, 0.0, 0.0, 1e-2, 1.0, 3)


def test_direct_nonnegative_and_absorbing():
    for r in range(20):
        p = simulate_direct(0.3, 0.3, 0.0, 1.0, 1e-3, 3.0, 9, replica=r)
        assert np.all(p.xiA >= 0) and np.all(p.xiB >= 0)
        for x in (p.xiA, p.xiB):
            hit = np.flatnonzero(x == 0)
            if len(hit):
                assert np.all(x[hit[0]:] == 0)


def test_ensemble_matches_single_paths():
    ens = simulate_direct_ensemble(1.0, 1.0, 0.5, 0.1, 1e-3, [0.2, 0.5], 3, 17)
    for r in range(3):
        p = simulate_direct(1.0, 1.0, 0.5, 0.1, 1e-3, 0.5, 17, replica=r)
        assert ens.xiA[r, 1] == p.xiA[500] and ens.xiB[r, 0] == p.xiB[200]


def test_neutral_martingale():
    ens = simulate_direct_ensemble(1.0, 0.5, 0.0, 0.0, 1e-3, [0.5], 2000, 5)
    tot = ens.xiA[:, 0] + ens.xiB[:, 0]
    se = tot.std(ddof=1) / np.sqrt(len(tot))
    assert abs(tot.mean() - 1.5) <= 3 * se


def test_direct_quadratic_variation():
    ens = simulate_direct_ensemble(1.0, 1.0, 0.5, 0.1, 1e-3, [0.5], 2000, 8)
    m = ens.xiA[:, 0] - 1.0 - ens.int_driftA[:, 0]
    gap = m**2 - ens.int_xiA[:, 0]
    assert abs(gap.mean()) <= 3 * gap.std(ddof=1) / np.sqrt(len(gap))


def test_time_change_examples():
    s = np.linspace(0, 1, 11)
    mp = time_change(MassPath(s, np.ones_like(s)))
    assert np.allclose(mp.times_t, s)
    assert invert_time(mp, 0.37) == pytest.approx(0.37)
    mp = time_change(MassPath(s, 2 * np.ones_like(s)))
    assert mp.times_t[-1] == pytest.approx(2.0)
    assert invert_time(mp, 1.0) == pytest.approx(0.5)
    with pytest.raises(RangeError):
        invert_time(mp, 2.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(3, 60))
def test_time_change_round_trip(seed, k):
    g = np.random.default_rng(seed)
    s = np.cumsum(g.uniform(0.01, 0.2, k))
    s -= s[0]
    mp = time_change(MassPath(s, g.uniform(0.1, 5.0, k)))
    assert np.all(np.diff(mp.times_t) > 0) and mp.times_t[0] == 0
    for u in g.uniform(0, s[-1], 5):
        t = np.interp(u, s, mp.times_t)
        assert abs(invert_time(mp, t) - u) <= 1e-9 * s[-1]
