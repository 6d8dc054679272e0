from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lookdown.errors import ArgumentError
from lookdown.events import (EventSource, EventStream, KIND_NEUTRAL, NeutralAtom, PotentialAtom,
                             gen_neutral_events, gen_potential_events, merge_streams, rate_cap)


def test_neutral_empty_cases():
    assert len(gen_neutral_events(3, 0.0, 1)) == 0
    assert len(gen_neutral_events(1, 10.0, 1)) == 0


def test_neutral_count_mean():
    counts = [len(gen_neutral_events(10, 100.0, 7, replica=r)) for r in range(20)]
    # single-draw check as stated, plus the average of repeated draws
    assert abs(counts[0] - 4500) <= 3 * np.sqrt(4500)
    assert abs(np.mean(counts) - 4500) <= 3 * np.sqrt(4500 / 20)


def test_neutral_negative_horizon():
    with pytest.raises(ArgumentError):
        gen_neutral_events(3, -1.0, 1)


def test_potential_cases():
    assert len(gen_potential_events(5, 2.0, 0.0, ("beta", "delta"), 1)) == 0
    ev = gen_potential_events(1, 1000.0, 1.0, ("delta",), 3)
    assert abs(len(ev) - 1000) <= 3 * np.sqrt(1000)
    ev = gen_potential_events(2, 50.0, 2.0, ("beta", "delta"), 5)
    z = ev.z
    assert abs(z.mean() - 1.0) <= 3 * z.std(ddof=1) / np.sqrt(len(z))
    assert np.all((z >= 0) & (z <= 2.0)) and np.all((ev.w >= 0) & (ev.w <= 1))
    with pytest.raises(ArgumentError):
        gen_potential_events(2, 1.0, -1.0, ("beta",), 1)


def test_merge_examples():
    empty = EventStream.empty(3, 5.0)
    assert len(merge_streams(empty, empty)) == 0
    one = EventStream.from_atoms([NeutralAtom(1.0, 1, 2)], 3, 5.0)
    m = merge_streams(one, empty)
    assert m.atoms == one.atoms
    a = EventStream.from_atoms([NeutralAtom(1.0, 1, 2), NeutralAtom(3.0, 2, 3)], 3, 5.0)
    b = EventStream.from_atoms([PotentialAtom(2.0, 1, 0.1, 0.5, "beta")], 3, 5.0, cap_C=1.0)
    assert list(merge_streams(a, b).time) == [1.0, 2.0, 3.0]
    with pytest.raises(ArgumentError):
        merge_streams(a, EventStream.empty(3, 4.0))


def test_atom_validation():
    with pytest.raises(ArgumentError):
        NeutralAtom(0.0, 2, 2)
    with pytest.raises(ArgumentError):
        NeutralAtom(-1.0, 1, 2)
    with pytest.raises(ArgumentError):
        PotentialAtom(0.0, 1, 0.1, 1.5, "beta")


def test_reproducible_and_projective():
    a = EventSource(6, 11, 2, cap_C=3.0).window(0.0, 4.0)
    b = EventSource(6, 11, 2, cap_C=3.0).window(0.0, 4.0)
    assert a.to_csv() == b.to_csv()
    # a run on more levels sees the same atoms on the first levels
    big = EventSource(9, 11, 2, cap_C=3.0).window(0.0, 4.0)
    keep = [x for x in big.atoms
            if (isinstance(x, NeutralAtom) and x.j <= 6) or (isinstance(x, PotentialAtom) and x.level <= 6)]
    assert keep == a.atoms


def test_windows_match_single_draw_counts():
    # windows are independent Poisson pieces: totals match the rate
    src = EventSource(5, 4, 0)
    total = sum(len(w) for w in src.windows(0.5, 200.0))
    assert abs(total - 2000) <= 4 * np.sqrt(2000)
    src = EventSource(5, 4, 0)
    src.window(0.0, 1.0)
    with pytest.raises(ArgumentError):
        src.window(2.0, 3.0)


def test_interarrival_exponential():
    ev = gen_neutral_events(2, 10_500.0, 21)
    gaps = np.diff(np.r_[0.0, ev.time])[:10_000]
    assert stats.kstest(gaps, "expon").pvalue > 0.01


def test_disjoint_seed_counts_uncorrelated():
    a = np.array([len(gen_neutral_events(4, 5.0, 100, r)) for r in range(400)])
    b = np.array([len(gen_neutral_events(4, 5.0, 101, r)) for r in range(400)])
    rho = np.corrcoef(a, b)[0, 1]
    assert abs(rho) <= 3 / np.sqrt(len(a))


def test_csv_dump():
    ev = EventStream.from_atoms([NeutralAtom(0.5, 1, 2), PotentialAtom(0.25, 3, 0.1, 0.2, "delta")],
                                3, 1.0, cap_C=1.0)
    buf = io.StringIO()
    ev.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "kind,time_s,i,j,level,z,w,mark"
    assert lines[1].split(",")[1] == "0.25" and lines[1].split(",")[-1] == "delta"
    assert lines[2].split(",")[2:4] == ["1", "2"]


def test_rate_cap():
    assert rate_cap(0.5, 0.1, 10.0) == 50.0
    assert rate_cap(0.0, 0.0, 10.0, mutation=True) == 10.0


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**31), horizon=st.floats(0.0, 3.0),
       cap=st.floats(0.0, 4.0))
def test_stream_invariants(n, seed, horizon, cap):
    ev = EventSource(n, seed, 0, cap_C=cap).window(0.0, horizon)
    assert np.all(np.diff(ev.time) >= 0)
    assert np.all((ev.time >= 0) & (ev.time < max(horizon, 1e-300)))
    neu = ev.kind == KIND_NEUTRAL
    assert np.all(ev.a[neu] < ev.b[neu]) and np.all(ev.a[neu] >= 1) and np.all(ev.b[neu] <= n)
    pot = ~neu
    assert np.all((ev.z[pot] >= 0) & (ev.z[pot] <= cap))
    assert np.all((ev.a[pot] >= 1) & (ev.a[pot] <= n))
    # each single stream strictly increasing
    for j in range(2, n + 1):
        for i in range(1, j):
            t = ev.time[neu & (ev.a == i) & (ev.b == j)]
            assert np.all(np.diff(t) > 0)


@settings(max_examples=30, deadline=None)
@given(times=st.lists(st.floats(0.0, 1.0), min_size=0, max_size=12))
def test_from_atoms_sorted_and_stable(times):
    atoms = [NeutralAtom(t, 1, 2 + (k % 2)) for k, t in enumerate(times)]
    ev = EventStream.from_atoms(atoms, 3, 1.0)
    assert np.all(np.diff(ev.time) >= 0)
    again = EventStream.from_atoms(list(reversed(atoms)), 3, 1.0)
    assert ev.atoms == again.atoms
