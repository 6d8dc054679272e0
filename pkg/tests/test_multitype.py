from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lookdown.engine import RunConfig, advance
from lookdown.errors import ArgumentError, SchemaError
from lookdown.events import EventStream, PotentialAtom
from lookdown.genealogy import check_ultrametric
from lookdown.multitype import (MultitypeModel, advance_multitype, drift_total_mass_general,
                                initial_state, q_general)
from lookdown.sde import drift_total_mass
from lookdown.stats import compare_distributions


def q_two_type(h, G, v, z, w, mark, b, c):
    """The two-type update rule written out directly."""
    G = list(G)
    n = len(G)
    p = G.count("A") / n
    if mark == "beta":
        thr = b * p * v
        return "A" if z <= thr and thr > 0 else h
    opp = 1 - p if h == "A" else p
    thr = c * opp * v * v
    if z <= thr and thr > 0:
        k = min(max(math.ceil(w * n * (1 - 1e-12)), 1), n)
        return G[k - 1]
    return h


def test_two_type_reduction_exhaustive_grid():
    b, c = 0.7, 1.3
    model = MultitypeModel.two_type_embedding(b, c)
    zs = np.linspace(0.0, 3.0, 13)
    ws = np.linspace(0.0, 1.0, 11)
    vs = (0.3, 1.0, 1.7)
    configs = [G for n in (1, 2, 3, 4) for G in itertools.product("AB", repeat=n)]
    count = 0
    for G, h, v, z, w, mark in itertools.product(configs, "AB", vs, zs, ws, ("beta", "delta")):
        assert q_general(h, G, v, z, w, mark, model) == q_two_type(h, G, v, z, w, mark, b, c)
        count += 1
    assert count > 50_000


def test_identity_mutation_and_zero_competition():
    model = MultitypeModel(["A", "B", "C"], {"A": 1.0, "B": 0.0, "C": 0.5},
                           {h: {g: 0.0 for g in "ABC"} for h in "ABC"},
                           {h: {h: 1.0} for h in "ABC"})
    G = ["A", "B", "C", "C"]
    for h in "ABC":
        for w in np.linspace(0, 1, 9):
            assert q_general(h, G, 2.0, 0.1, w, "lambda", model) == h
            assert q_general(h, G, 2.0, 0.0, w, "delta", model) == h


def test_size_biased_beta():
    # b(B) = 0: a beta birth can only copy the A-levels
    model = MultitypeModel(["A", "B", "C"], {"A": 2.0, "B": 0.0, "C": 1.0},
                           {h: {g: 0.0 for g in "ABC"} for h in "ABC"})
    G = ["B", "A", "C", "B"]
    # weights (0, 2, 1, 0) / 3: w < 2/3 -> level 2 (A), otherwise level 3 (C)
    assert q_general("B", G, 1.0, 0.0, 0.5, "beta", model) == "A"
    assert q_general("B", G, 1.0, 0.0, 0.9, "beta", model) == "C"
    assert q_general("B", G, 1.0, 0.8, 0.9, "beta", model) == "B"  # threshold v * 3/4


def test_mutation_quantile():
    model = MultitypeModel(["A", "B"], {"A": 0.0, "B": 0.0},
                           {h: {g: 0.0 for g in "AB"} for h in "AB"},
                           {"A": {"A": 0.25, "B": 0.75}, "B": {"B": 1.0}})
    assert q_general("A", ["A", "A"], 1.0, 0.5, 0.2, "lambda", model) == "A"
    assert q_general("A", ["A", "A"], 1.0, 0.5, 0.3, "lambda", model) == "B"
    assert q_general("A", ["A", "A"], 1.0, 1.5, 0.3, "lambda", model) == "A"  # z > v


def test_general_drift():
    b, c = 0.8, 0.6
    model = MultitypeModel.two_type_embedding(b, c)
    for G in (["A", "B"], ["A", "A", "B", "B", "B"], ["B"] * 3):
        p = G.count("A") / len(G)
        for v in (0.5, 2.0):
            assert drift_total_mass_general(v, G, model) == pytest.approx(drift_total_mass(v, p, b, c))
    zero = MultitypeModel(["A", "B"], {"A": 0, "B": 0}, {h: {g: 0 for g in "AB"} for h in "AB"})
    assert drift_total_mass_general(3.0, ["A", "B"], zero) == 0.0
    mono = MultitypeModel(["A"], {"A": 1.5}, {"A": {"A": 0.0}})
    assert drift_total_mass_general(2.0, ["A"] * 4, mono) == pytest.approx(3.0)


def test_model_validation_and_round_trip(tmp_path):
    with pytest.raises(ArgumentError):
        MultitypeModel(["A", "B"], {"A": 1}, {h: {g: 0 for g in "AB"} for h in "AB"})
    with pytest.raises(ArgumentError):
        MultitypeModel(["A", "B"], {"A": 1, "B": 0}, {h: {g: 0 for g in "AB"} for h in "AB"},
                       {"A": {"A": 0.5}, "B": {"B": 1.0}})
    with pytest.raises(ArgumentError):
        MultitypeModel(["A", "B"], {"A": -1, "B": 0}, {h: {g: 0 for g in "AB"} for h in "AB"})
    with pytest.raises(SchemaError) as err:
        MultitypeModel.from_dict({"types": ["A"], "b": {"A": 1}, "c": {"A": {"A": 0}}, "extra": 1})
    assert "extra" in err.value.keys
    m = MultitypeModel(["A", "B", "C"], {"A": 1.0, "B": 0.5, "C": 0.0},
                       {h: {g: 0.1 for g in "ABC"} for h in "ABC"},
                       {"A": {"A": 0.9, "B": 0.1}, "B": {"B": 1.0}, "C": {"A": 0.5, "C": 0.5}})
    m.save(tmp_path / "m.json")
    back = MultitypeModel.load(tmp_path / "m.json")
    assert back.to_dict() == m.to_dict()


def test_mutation_cap_enforced():
    m = MultitypeModel(["A", "B"], {"A": 0.0, "B": 0.0}, {h: {g: 0.0 for g in "AB"} for h in "AB"},
                       {"A": {"B": 1.0}, "B": {"A": 1.0}})
    cfg = RunConfig(n_levels=4, M=10, horizon_s=0.1, seed=1, cap_C=5.0)
    with pytest.raises(ArgumentError):
        advance_multitype(initial_state(cfg, m), cfg, m)


def test_lambda_events_leave_distances_untouched():
    m = MultitypeModel(["A", "B"], {"A": 0.0, "B": 0.0}, {h: {g: 0.0 for g in "AB"} for h in "AB"},
                       {"A": {"B": 1.0}, "B": {"A": 1.0}})
    cfg = RunConfig(n_levels=3, M=10, horizon_s=0.5, seed=1, noise=False, init_types=["A", "A", "B"])
    atoms = [PotentialAtom(0.2, 2, 0.1, 0.5, "lambda")]
    ev = EventStream.from_atoms(atoms, 3, 0.5, cap_C=10.0)
    tr = advance_multitype(initial_state(cfg, m), cfg, m, ev)
    assert list(tr.final.G) == [0, 1, 1]
    off = tr.final.R[~np.eye(3, dtype=bool)]
    assert np.allclose(off, 1.0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_multitype_engine_invariants(seed):
    m = MultitypeModel(["A", "B", "C"], {"A": 1.0, "B": 0.5, "C": 0.2},
                       {h: {g: 0.3 for g in "ABC"} for h in "ABC"},
                       {"A": {"A": 0.9, "B": 0.1}, "B": {"B": 0.9, "C": 0.1}, "C": {"C": 0.9, "A": 0.1}})
    cfg = RunConfig(n_levels=8, M=10, horizon_s=0.5, seed=seed, init_probs=[0.4, 0.3, 0.3],
                    check_ultrametric=True)
    tr = advance_multitype(initial_state(cfg, m), cfg, m, output_times=[0.25, 0.5], record_states=True)
    assert tr.check_failures == 0
    for snap in tr.states:
        assert check_ultrametric(snap.R).passed and set(snap.G) <= {0, 1, 2}


def test_embedding_matches_two_type_engine_small():
    b, c, R = 1.0, 0.5, 300
    model = MultitypeModel.two_type_embedding(b, c)
    cfg2 = RunConfig(n_levels=16, b=b, c=c, M=10, horizon_s=0.5, seed=31, track_R=False)
    cfgm = RunConfig(n_levels=16, M=10, horizon_s=0.5, seed=32, track_R=False)
    z2 = [advance(cfg2.initial_state(r), cfg2, replica=r).zeta[0] for r in range(R)]
    zm = [advance_multitype(initial_state(cfgm, model, r), cfgm, model, replica=r).zeta[0] for r in range(R)]
    assert compare_distributions(z2, zm).p_value > 0.001
