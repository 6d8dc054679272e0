from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lookdown.engine import (A, B, LookdownState, RunConfig, activation_check, advance,
                             apply_neutral_event, apply_potential_event, grow_distances,
                             neutral_source_map, project_masses, replace_level, sample_individual)
from lookdown.errors import ArgumentError, InvariantViolation
from lookdown.events import EventStream, NeutralAtom, PotentialAtom
from lookdown.genealogy import check_ultrametric


def state(G, R=None, zeta=1.0):
    n = len(G)
    return LookdownState(0.0, zeta, np.zeros((n, n)) if R is None else np.asarray(R, float), G)


# ---- reference operations --------------------------------------------------------

def test_neutral_event_examples():
    out = apply_neutral_event(state([A, B]), 1, 2)
    assert list(out.G) == [A, A] and out.R[0, 1] == 0
    R = np.array([[0, 4, 6], [4, 0, 6], [6, 6, 0]], float)
    out = apply_neutral_event(state([A, B, B], R), 1, 2)
    assert out.R[0, 1] == 0 and out.R[0, 2] == 4 and out.R[1, 2] == 4
    assert np.all(apply_neutral_event(state([A, B, A]), 1, 2).R == 0)
    with pytest.raises(ArgumentError):
        apply_neutral_event(state([A, B, A]), 2, 2)
    with pytest.raises(ArgumentError):
        apply_neutral_event(state([A, B, A]), 1, 4)


def test_neutral_source_map_shape():
    # level j copies i, everything at or above j shifts up by one
    assert list(neutral_source_map(5, 2, 4)) == [0, 1, 2, 1, 3]


def test_activation_examples():
    st_ = state([A, B], zeta=2.0)
    assert activation_check(st_, PotentialAtom(0.0, 1, 0.5, 0.3, "beta"), 1.0, 0.0)
    atom = PotentialAtom(0.0, 1, 1.5, 0.3, "beta")
    assert not activation_check(st_, atom, 1.0, 0.0)
    out, applied = apply_potential_event(st_, atom, 1.0, 0.0)
    assert not applied and np.array_equal(out.G, st_.G)
    st3 = state([A, A, A, B], zeta=2.0)
    assert activation_check(st3, PotentialAtom(0.0, 1, 0.8, 0.3, "delta"), 0.0, 1.0)


def test_sample_individual_examples():
    assert sample_individual(state([A] * 5), 0.0, False) == 1
    assert sample_individual(state([B, A, B, A]), 0.9, True) == 4
    assert sample_individual(state([A, B, B]), 1.0, False) == 3
    with pytest.raises(InvariantViolation):
        sample_individual(state([B, B]), 0.5, True)


def test_potential_update_examples():
    R = np.array([[0, 2, 6], [2, 0, 6], [6, 6, 0]], float)
    st_ = state([A, B, B], R, zeta=3.0)
    out, applied = apply_potential_event(st_, PotentialAtom(0.0, 2, 0.01, 0.1, "delta"), 0.0, 1.0, parent=1)
    assert applied
    assert out.R[1, 2] == R[0, 2] and out.R[0, 1] == 0 and out.G[1] == st_.G[0]
    out, applied = apply_potential_event(state([B, A], zeta=2.0), PotentialAtom(0.0, 1, 0.01, 0.5, "beta"),
                                         1.0, 0.0, parent=2)
    assert applied and list(out.G) == [A, A] and out.R[0, 1] == 0


def test_grow_distances_examples():
    out = grow_distances(state([A, B, A]), 0.5)
    assert np.allclose(out.R[~np.eye(3, dtype=bool)], 1.0) and np.all(np.diag(out.R) == 0)
    out = grow_distances(state([A, B], zeta=3.0), 0.25)
    assert out.R[0, 1] == pytest.approx(1.5) and check_ultrametric(out.R).passed


def test_project_masses_examples():
    assert project_masses(state([A, B], zeta=2.0)) == (1.0, 1.0)
    assert project_masses(state([A, A], zeta=2.0)) == (2.0, 0.0)
    assert project_masses(state([B, B], zeta=2.0)) == (0.0, 2.0)


# ---- engine vs reference ---------------------------------------------------------

def test_engine_matches_reference_operations():
    """Drive the compiled engine one atom at a time and replay with the reference ops."""
    rng = np.random.default_rng(3)
    n, b, c = 6, 1.0, 1.0
    cfg = RunConfig(n_levels=n, b=b, c=c, M=10, horizon_s=0.01, seed=5)
    st_ = cfg.initial_state(0)
    ref = st_.copy()
    s = 0.0
    for step in range(150):
        h = 0.01
        if rng.random() < 0.5:
            i = int(rng.integers(1, n))
            atom = NeutralAtom(s, i, int(rng.integers(i + 1, n + 1)))
        else:
            atom = PotentialAtom(s, int(rng.integers(1, n + 1)), float(rng.random() * 3),
                                 float(rng.random()), ("beta", "delta")[rng.integers(2)])
        ev = EventStream.from_atoms([atom], n, s + h, cap_C=100.0)
        new = advance(st_, dataclasses.replace(cfg, horizon_s=s + h), ev, replica=step).final
        if isinstance(atom, NeutralAtom):
            ref = apply_neutral_event(ref, atom.i, atom.j)
        else:
            ref.zeta = st_.zeta
            ref, _ = apply_potential_event(ref, atom, b, c)
        grown = new.t_accum - st_.t_accum
        ref.R = ref.R + 2 * grown
        np.fill_diagonal(ref.R, 0)
        assert np.array_equal(ref.G, new.G), step
        assert np.allclose(ref.R, new.R, rtol=1e-12, atol=1e-12), step
        st_, s = new, new.s
        if st_.stop:
            break


def test_frozen_dynamics():
    cfg = RunConfig(n_levels=4, M=10, horizon_s=0.5, noise=False, seed=1)
    ev = EventStream.empty(4, 0.5)
    tr = advance(cfg.initial_state(0), cfg, ev, output_times=[0.0, 0.25, 0.5], record_states=True)
    assert np.all(tr.zeta == 1.0)
    assert [s.R[0, 1] for s in tr.states] == pytest.approx([0.0, 0.5, 1.0])
    assert all(np.array_equal(s.G, tr.states[0].G) for s in tr.states)


def test_single_neutral_atom_distance_reset():
    cfg = RunConfig(n_levels=2, M=10, horizon_s=0.5, noise=False, seed=1, init_types=["A", "B"])
    ev = EventStream.from_atoms([NeutralAtom(0.3, 1, 2)], 2, 0.5)
    fin = advance(cfg.initial_state(0), cfg, ev).final
    assert fin.R[0, 1] == pytest.approx(0.4, abs=1e-12)
    assert list(fin.G) == [A, A]


def test_monotype_absorption():
    cfg = RunConfig(n_levels=16, b=1.0, c=5.0, M=10, horizon_s=1.0, seed=4, init_types=["A"] * 16)
    tr = advance(cfg.initial_state(0), cfg, record_path=True)
    assert np.all(tr.final.G == A) and np.all(tr.muA == 1.0)


def test_events_shorter_than_horizon():
    cfg = RunConfig(n_levels=3, M=10, horizon_s=1.0, seed=1)
    with pytest.raises(ArgumentError):
        advance(cfg.initial_state(0), cfg, EventStream.empty(3, 0.5))


def test_config_validation():
    with pytest.raises(ArgumentError):
        RunConfig(n_levels=3, M=1.0, horizon_s=1.0).validate()
    with pytest.raises(ArgumentError):
        RunConfig(n_levels=3, M=10.0, v0=20.0, horizon_s=1.0).validate()
    with pytest.raises(ArgumentError):
        RunConfig(n_levels=3, horizon_s=1.0, horizon_t=1.0).validate()
    bad = np.array([[0, 2, 5], [2, 0, 3], [5, 3, 0]], float)
    with pytest.raises(ArgumentError):
        RunConfig(n_levels=3, horizon_s=1.0, R0=bad.tolist()).validate()


def test_reproducible_runs():
    cfg = RunConfig(n_levels=8, b=0.5, c=0.5, M=10, horizon_s=0.5, seed=12)
    a = advance(cfg.initial_state(3), cfg, replica=3, output_times=[0.1, 0.5])
    b = advance(cfg.initial_state(3), cfg, replica=3, output_times=[0.1, 0.5])
    assert np.array_equal(a.zeta, b.zeta) and np.array_equal(a.final.R, b.final.R)


def test_t_clock_outputs_land_on_requested_times():
    cfg = RunConfig(n_levels=8, b=0.5, c=0.1, M=50, horizon_t=0.5, v0=2.0, seed=2)
    tr = advance(cfg.initial_state(0), cfg, output_times=[0.2, 0.5])
    assert tr.t == pytest.approx([0.2, 0.5], rel=1e-12)


def test_state_json_round_trip():
    cfg = RunConfig(n_levels=5, b=0.5, c=0.5, M=10, horizon_s=0.3, seed=6)
    fin = advance(cfg.initial_state(0), cfg).final
    back = LookdownState.from_json_dict(fin.to_json_dict())
    assert np.array_equal(back.R, fin.R) and np.array_equal(back.G, fin.G)
    assert back.zeta == fin.zeta and back.t_accum == fin.t_accum


# ---- properties -----------------------------------------------------------------

ops = st.lists(
    st.one_of(
        st.tuples(st.just("neutral"), st.integers(1, 7), st.integers(1, 7)),
        st.tuples(st.just("replace"), st.integers(1, 7), st.integers(1, 7)),
        st.tuples(st.just("grow"), st.floats(1e-4, 2.0), st.floats(0.1, 5.0)),
    ),
    min_size=1, max_size=40)


@settings(max_examples=80, deadline=None)
@given(seq=ops, types=st.lists(st.sampled_from([A, B]), min_size=7, max_size=7))
def test_reference_ops_preserve_ultrametric(seq, types):
    st_ = state(types)
    for op, x, y in seq:
        if op == "neutral":
            if x == y:
                continue
            i, j = min(x, y), max(x, y)
            st_ = apply_neutral_event(st_, i, j)
            assert st_.R[i - 1, j - 1] == 0
        elif op == "replace":
            st_ = replace_level(st_, x, y)
            assert st_.R[x - 1, y - 1] == 0 and st_.G[x - 1] == st_.G[y - 1]
        else:
            st_.zeta = y
            st_ = grow_distances(st_, x)
        assert check_ultrametric(st_.R).passed
        assert np.array_equal(st_.R, st_.R.T) and np.all(np.diag(st_.R) == 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12), b=st.floats(0, 2), c=st.floats(0, 2))
def test_engine_invariants(seed, n, b, c):
    cfg = RunConfig(n_levels=n, b=b, c=c, M=10, horizon_s=0.4, seed=seed, check_ultrametric=True)
    tr = advance(cfg.initial_state(0), cfg, output_times=np.linspace(0, 0.4, 5),
                 record_states=True, record_path=True)
    assert tr.check_failures == 0
    for snap, mu in zip(tr.states, tr.muA):
        assert snap.muA == mu
        assert check_ultrametric(snap.R).passed
        if snap.stop is None:
            assert 1 / cfg.M < snap.zeta < cfg.M
    P = tr.path
    t_trap = np.trapezoid(np.r_[1.0, P[:, 1]], np.r_[0.0, P[:, 0]])
    assert tr.final.t_accum == pytest.approx(t_trap, rel=1e-9)
