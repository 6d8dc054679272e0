"""Drivers for the statistical acceptance checks.

Each ``criterion_*`` function runs one check at the given scale and returns
a ``Criterion`` with a pass flag and the numbers behind it. Defaults are the
full-scale settings; tests may pass smaller replica counts for smoke runs.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np

from . import mgcheck
from .engine import RunConfig, advance
from .genealogy import check_ultrametric
from .multitype import MultitypeModel, advance_multitype
from .sde import simulate_direct_ensemble
from .stats import compare_distributions, mean_se, moment_test, two_sample_mean_test


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] #{self.number} {self.name}: {self.summary}"


# ---- 1 -----------------------------------------------------------------------

def criterion_feller_extinction(replicas=10_000, seed=101, dt=1e-3, T=2.0, tol=0.015) -> Criterion:
    ens = simulate_direct_ensemble(1.0, 0.0, 0.0, 0.0, dt, [T], replicas, seed)
    frac = float(np.mean(ens.hitA <= T))
    target = math.exp(-2.0 * 1.0 / T)
    ok = abs(frac - target) <= tol
    return Criterion(1, "Feller extinction", ok,
                     f"P(extinct by {T}) = {frac:.4f}, target {target:.4f} +/- {tol}",
                     {"estimate": frac, "target": target, "replicas": replicas})


# ---- 2, 9, 12 ------------------------------------------------------------------

PROJ = dict(b=0.5, c=0.1, M=50.0, T=0.5, xA0=1.0, xB0=1.0)


def projection_config(n_levels: int, seed: int) -> RunConfig:
    v0 = PROJ["xA0"] + PROJ["xB0"]
    return RunConfig(n_levels=n_levels, b=PROJ["b"], c=PROJ["c"], M=PROJ["M"],
                     horizon_t=PROJ["T"], v0=v0, init_types="exact",
                     muA0=PROJ["xA0"] / v0, seed=seed, track_R=False)


def lookdown_projection_samples(n_levels: int, replicas: int, seed: int) -> dict:
    """Per-replica xi_A, xi_B and original-clock integrals at t = T."""
    cfg = projection_config(n_levels, seed)
    keys = ("xiA", "xiB", "intA", "intAB", "stopped")
    out = {k: np.empty(replicas) for k in keys}
    for r in range(replicas):
        tr = advance(cfg.initial_state(r), cfg, replica=r)
        out["xiA"][r] = tr.xiA[0]
        out["xiB"][r] = tr.xiB[0]
        out["intA"][r] = tr.int_xiA[0]
        out["intAB"][r] = tr.int_xiAxiB[0]
        out["stopped"][r] = tr.stop[0] != 0
    out["xiAxiB"] = out["xiA"] * out["xiB"]
    return out


def direct_projection_samples(replicas: int, seed: int, dt=1e-3) -> dict:
    ens = simulate_direct_ensemble(PROJ["xA0"], PROJ["xB0"], PROJ["b"], PROJ["c"], dt,
                                   [PROJ["T"]], replicas, seed)
    xiA, xiB = ens.xiA[:, 0], ens.xiB[:, 0]
    return {"xiA": xiA, "xiB": xiB, "xiAxiB": xiA * xiB,
            "intA": ens.int_xiA[:, 0], "driftA": ens.int_driftA[:, 0]}


def criterion_projection(look: dict, direct: dict) -> Criterion:
    tests = [two_sample_mean_test(look[k], direct[k], 3.0, k) for k in ("xiA", "xiB", "xiAxiB")]
    ok = all(t.passed for t in tests)
    summ = "; ".join(f"{t.name}: diff {t.estimate:+.4f} (3SE {3 * t.se:.4f})" for t in tests)
    return Criterion(2, "projection consistency", ok, summ,
                     {t.name: t.to_dict() for t in tests})


def criterion_quadratic_variation(look: dict, direct: dict | None = None) -> Criterion:
    b, c = PROJ["b"], PROJ["c"]
    MA = look["xiA"] - PROJ["xA0"] - (b * look["intA"] - c * look["intAB"])
    res = moment_test(MA**2 - look["intA"], 0.0, 3.0, "M^2 - int xiA")
    det = {"lookdown": res.to_dict(), "var_M": float(np.mean(MA**2)),
           "mean_int_xiA": float(np.mean(look["intA"]))}
    if direct is not None:
        MD = direct["xiA"] - PROJ["xA0"] - direct["driftA"]
        det["direct"] = moment_test(MD**2 - direct["intA"], 0.0, 3.0, "direct").to_dict()
    return Criterion(9, "quadratic variation", res.passed,
                     f"E[M^2] = {det['var_M']:.4f} vs E[int xiA] = {det['mean_int_xiA']:.4f}, "
                     f"mean gap {res.estimate:+.4f} (3SE {3 * res.se:.4f})", det)


def criterion_truncation(by_n: dict) -> Criterion:
    """by_n maps n -> projection samples from coupled runs (same seed).

    ``details`` also carries the paired standard errors of both gaps, which
    tell whether the ordering of the gaps is resolved at this replica count.
    """
    ns = sorted(by_n)
    if len(ns) != 3:
        raise ValueError("need exactly three level counts")
    n1, n2, n3 = ns
    rows = {}
    ok = True
    for k in ("xiA", "xiB", "xiAxiB"):
        x = [np.asarray(by_n[n][k], float) for n in ns]
        m = [float(v.mean()) for v in x]
        se = mean_se(x[2])[1]
        g1, g2 = abs(m[1] - m[0]), abs(m[2] - m[1])
        good = g1 >= g2 and g2 < se
        ok &= good
        rows[k] = {"means": m, "gap_low": g1, "gap_high": g2, "se": se, "pass": good,
                   "se_gap_low": mean_se(x[1] - x[0])[1], "se_gap_high": mean_se(x[2] - x[1])[1]}
    summ = "; ".join(f"{k}: |d{n1}-{n2}| {v['gap_low']:.2e} >= |d{n2}-{n3}| {v['gap_high']:.2e} < SE {v['se']:.2e}"
                     for k, v in rows.items())
    return Criterion(12, "truncation convergence", ok, summ, rows)


# ---- 3 -----------------------------------------------------------------------

def criterion_neutral_martingale(replicas=2000, n_levels=256, seed=303, times=(0.25, 0.5, 1.0),
                                 muA0=0.5) -> Criterion:
    cfg = RunConfig(n_levels=n_levels, M=10.0, v0=1.0, horizon_s=max(times), init_types="exact",
                    muA0=muA0, seed=seed, track_R=False)
    mu = np.empty((replicas, len(times)))
    for r in range(replicas):
        mu[r] = advance(cfg.initial_state(r), cfg, replica=r, output_times=times).muA
    tests = [moment_test(mu[:, k], muA0, 3.0, f"s={s}") for k, s in enumerate(times)]
    ok = all(t.passed for t in tests)
    return Criterion(3, "neutral frequency martingale", ok,
                     "; ".join(f"{t.name}: {t.estimate:.4f} +/- {t.se:.4f}" for t in tests),
                     {t.name: t.to_dict() for t in tests})


# ---- 4 -----------------------------------------------------------------------

def criterion_ultrametric(replicas=200, n_levels=64, seed=404, horizon=1.0, spot=20) -> Criterion:
    cfg = RunConfig(n_levels=n_levels, b=1.0, c=1.0, M=10.0, v0=1.0, horizon_s=horizon,
                    seed=seed, check_ultrametric=True)
    checks = fails = 0
    spot_fail = spot_total = 0
    for r in range(replicas):
        rec = r < spot
        tr = advance(cfg.initial_state(r), cfg, replica=r,
                     output_times=np.linspace(0, horizon, 11) if rec else None, record_states=rec)
        checks += tr.checks
        fails += tr.check_failures
        if rec:
            for st in tr.states:
                spot_total += 1
                spot_fail += not check_ultrametric(st.R).passed
    ok = checks > 0 and fails == 0 and spot_fail == 0
    return Criterion(4, "ultrametricity", ok,
                     f"{checks - fails}/{checks} post-event states pass; "
                     f"{spot_total - spot_fail}/{spot_total} snapshots pass the independent check",
                     {"checks": checks, "failures": fails, "snapshots": spot_total,
                      "snapshot_failures": spot_fail})


# ---- 5 -----------------------------------------------------------------------

def criterion_exchangeability(replicas=2000, n_levels=32, seed=505, s=0.5, alpha=0.01) -> Criterion:
    cfg = RunConfig(n_levels=n_levels, b=0.5, c=0.5, M=10.0, v0=1.0, horizon_s=s,
                    init_types="iid", muA0=0.5, seed=seed)
    r12, r23, g1, g3 = (np.empty(replicas) for _ in range(4))
    for r in range(replicas):
        st = advance(cfg.initial_state(r), cfg, replica=r).final
        r12[r], r23[r] = st.R[0, 1], st.R[1, 2]
        g1[r], g3[r] = st.G[0] == 0, st.G[2] == 0
    kr = compare_distributions(r12, r23)
    kg = compare_distributions(g1, g3)
    ok = kr.p_value > alpha and kg.p_value > alpha
    return Criterion(5, "exchangeability", ok,
                     f"KS R(1,2) vs R(2,3) p={kr.p_value:.3f}; G(1) vs G(3) p={kg.p_value:.3f}",
                     {"R": dataclasses.asdict(kr), "G": dataclasses.asdict(kg)})


# ---- 6 -----------------------------------------------------------------------

def residual_config(seed=606, n_levels=16, s0=0.1, delta=0.01) -> RunConfig:
    return RunConfig(n_levels=n_levels, b=0.5, c=0.5, M=10.0, v0=1.0, horizon_s=s0 + delta,
                     init_types="iid", muA0=0.5, seed=seed)


def criterion_martingale_residuals(replicas=2000, seed=606, s0=0.1, delta=0.01, n_sub=101) -> Criterion:
    cfg = residual_config(seed, s0=s0, delta=delta)
    fns = [mgcheck.builtin(name, cfg.M) for name in ("bump_v", "bump_tanh_r12", "bump_gA1")]
    samples = mgcheck.residual_samples(cfg, fns, delta, replicas, s0, n_sub)
    reps = [mgcheck._report(f.name, delta, samples[f.name], s0) for f in fns]
    ok = all(r.passed for r in reps)
    return Criterion(6, "martingale residuals", ok,
                     "; ".join(f"{r.function_id}: {r.mean:+.2e} (3SE {3 * r.se:.2e})" for r in reps),
                     {r.function_id: r.to_dict() for r in reps})


# ---- 7 -----------------------------------------------------------------------

def criterion_distance_growth(n_windows=100, seed=707, n_levels=8, rtol=1e-6) -> Criterion:
    cfg = RunConfig(n_levels=n_levels, b=0.5, c=0.5, M=10.0, v0=1.0, horizon_s=2.0, seed=seed)
    errs = []
    r = 0
    while len(errs) < n_windows and r < 1000:
        tr = advance(cfg.initial_state(r), cfg, replica=r, record_path=True)
        r += 1
        P = tr.path
        cuts = np.flatnonzero(P[:, 4] == 1.0)
        for a, b in zip(cuts[:-1], cuts[1:]):
            seg = P[a:b]
            if len(seg) < 3:
                continue
            grow = seg[-1, 3] - seg[0, 3]
            quad = 2.0 * np.trapezoid(seg[:, 1], seg[:, 0])
            errs.append(abs(grow - quad) / max(abs(quad), 1e-300))
            if len(errs) >= n_windows:
                break
    worst = max(errs) if errs else float("inf")
    ok = len(errs) >= n_windows and worst <= rtol
    return Criterion(7, "distance growth law", ok,
                     f"{len(errs)} windows, max relative error {worst:.2e} (tol {rtol:g})",
                     {"windows": len(errs), "max_rel_err": worst})


# ---- 8 -----------------------------------------------------------------------

def criterion_b_extinction(replicas=500, seed=808, times=(5.0, 10.0, 20.0, 50.0), dt=1e-3) -> Criterion:
    ens = simulate_direct_ensemble(1.0, 1.0, 0.0, 1.0, dt, list(times), replicas, seed)
    fr = [float(np.mean(ens.hitB <= T)) for T in times]
    mono = all(x <= y for x, y in zip(fr, fr[1:]))
    ok = mono and fr[-1] >= 0.95
    return Criterion(8, "B-extinction trend", ok,
                     ", ".join(f"T={T:g}: {f:.3f}" for T, f in zip(times, fr)),
                     {"fractions": fr, "times": list(times)})


# ---- 10 ----------------------------------------------------------------------

def criterion_multitype_reduction(replicas=2000, n_levels=64, seeds=(1010, 1011), s=0.5,
                                  alpha=0.01) -> Criterion:
    b, c = 1.0, 0.5
    model = MultitypeModel.two_type_embedding(b, c)
    cfg2 = RunConfig(n_levels=n_levels, b=b, c=c, M=10.0, v0=1.0, horizon_s=s,
                     init_types="iid", muA0=0.5, seed=seeds[0], track_R=False)
    cfgm = dataclasses.replace(cfg2, seed=seeds[1])
    mu2, z2, mum, zm = (np.empty(replicas) for _ in range(4))
    for r in range(replicas):
        t2 = advance(cfg2.initial_state(r), cfg2, replica=r)
        tm = advance_multitype(cfgm.initial_state(r, model.types), cfgm, model, replica=r)
        mu2[r], z2[r] = t2.muA[0], t2.zeta[0]
        mum[r], zm[r] = tm.muA[0], tm.zeta[0]
    km = compare_distributions(mu2, mum)
    kz = compare_distributions(z2, zm)
    ok = km.p_value > alpha and kz.p_value > alpha
    return Criterion(10, "multitype reduction", ok,
                     f"KS muA p={km.p_value:.3f}; KS zeta p={kz.p_value:.3f}",
                     {"muA": dataclasses.asdict(km), "zeta": dataclasses.asdict(kz)})


# ---- 11 ----------------------------------------------------------------------

_RUN = {"n_levels": 12, "b": 0.5, "c": 0.5, "M": 10.0, "horizon_s": 0.5, "seed": 1111}
DETERMINISM_CASES = {
    "simulate-direct": ("simulate", {"mode": "direct", "replicas": 3,
                                     "direct": {"xA0": 1.0, "xB0": 1.0, "b": 0.5, "c": 0.1, "T": 0.5,
                                                "seed": 1111}}),
    "simulate-lookdown": ("simulate", {"mode": "lookdown", "replicas": 4, "workers": 2, "run": _RUN,
                                       "output_times": [0.0, 0.25, 0.5], "snapshots": True}),
    "simulate-multitype": ("simulate", {
        "mode": "multitype", "replicas": 3, "run": dict(_RUN, init_probs=[0.5, 0.25, 0.25]),
        "model": {"types": ["A", "B", "C"], "b": {"A": 1.0, "B": 0.5, "C": 0.0},
                  "c": {h: {g: 0.2 for g in "ABC"} for h in "ABC"},
                  "ell": {"A": {"A": 0.9, "C": 0.1}, "B": {"B": 1.0}, "C": {"C": 1.0}}}}),
    "validate": ("validate", {"mode": "lookdown", "replicas": 3, "run": _RUN}),
    "mgtest": ("mgtest", {"mode": "mgtest", "replicas": 20, "workers": 2,
                          "run": dict(_RUN, horizon_s=0.11), "s0": 0.1, "delta_s": 0.01}),
    "project": ("project", {"mode": "project-compare", "replicas": 30,
                            "run": {"n_levels": 16, "b": 0.5, "c": 0.1, "M": 50.0, "horizon_t": 0.3,
                                    "v0": 2.0, "init_types": "exact", "seed": 1111, "track_R": False}}),
    "export-tree": ("export-tree", {"mode": "export-tree", "replicas": 2, "run": _RUN}),
    "fragments": ("fragments", {"mode": "fragments", "replicas": 2, "run": _RUN,
                                "probe_times": [0.0, 0.2, 0.5]}),
}


def criterion_determinism(workdir) -> Criterion:
    """Run every subcommand twice on the same config and compare all output bytes."""
    from .cli import main

    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    rows = {}
    for name, (sub, cfg) in DETERMINISM_CASES.items():
        path = work / f"{name}.json"
        path.write_text(json.dumps(cfg))
        outs = []
        codes = []
        for k in range(2):
            d = work / f"{name}-{k}"
            codes.append(main([sub, str(path), "-o", str(d)]))
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        same = outs[0] == outs[1] and len(outs[0]) > 1
        rows[name] = {"identical": same, "files": sorted(outs[0]), "exit": codes}
    ok = all(r["identical"] and r["exit"][0] in (0, 1) for r in rows.values())
    bad = [k for k, r in rows.items() if not r["identical"]]
    return Criterion(11, "determinism", ok,
                     f"{len(rows) - len(bad)}/{len(rows)} subcommand runs byte-identical"
                     + (f" (differ: {', '.join(bad)})" if bad else ""), rows)
