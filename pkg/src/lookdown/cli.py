"""Command line runner.

Every run is described by one JSON file; the command line only picks the
subcommand, the config path, the output directory and optional seed and
replica overrides::

    lookdown simulate run.json -o out/
    lookdown validate run.json --replicas 8
    lookdown mgtest mg.json
    lookdown project proj.json
    lookdown export-tree tree.json
    lookdown fragments frag.json

The output directory defaults to ``$LOOKDOWN_OUTPUT_DIR`` or ``./lookdown_out``.
Exit codes: 0 when every pass flag in the report is true, 1 when a check
fails, 2 on usage, configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import genealogy, mgcheck
from .engine import RunConfig, advance, STOP_NAMES
from .errors import ArgumentError, SchemaError
from .events import EventSource
from .multitype import MultitypeModel, advance_multitype
from .sde import simulate_direct, simulate_direct_ensemble
from .stats import mean_se, moment_test, two_sample_mean_test

ENV_OUTPUT = "LOOKDOWN_OUTPUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

MODES = ("direct", "lookdown", "multitype", "project-compare", "mgtest", "export-tree", "fragments")
SUBCOMMANDS = {
    "simulate": ("direct", "lookdown", "multitype"),
    "validate": ("lookdown", "multitype"),
    "mgtest": ("mgtest",),
    "project": ("project-compare",),
    "export-tree": ("export-tree",),
    "fragments": ("fragments",),
}
DIRECT_KEYS = {"xA0", "xB0", "b", "c", "dt_t", "T", "seed"}


def _fmt(x) -> str:
    return format(float(x), ".17g")


# ---- configuration ----------------------------------------------------------

@dataclass
class Experiment:
    mode: str
    replicas: int = 1
    workers: int = 1
    run: RunConfig | None = None
    model: MultitypeModel | None = None
    direct: dict | None = None
    output_times: list | None = None
    snapshots: bool = False
    probe_times: list | None = None
    functions: list = field(default_factory=lambda: ["bump_v", "bump_tanh_r12", "bump_gA1"])
    delta_s: float = 0.01
    s0: float = 0.0
    n_sub: int = 101
    sample_k: int = 4
    sample_m: int = 10
    sigmas: float = 3.0

    @classmethod
    def from_dict(cls, d: dict) -> "Experiment":
        if not isinstance(d, dict):
            raise SchemaError(["<root>"], "config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - names
        if "mode" not in d:
            bad.add("mode")
        run, direct = d.get("run"), d.get("direct")
        if isinstance(run, dict):
            rnames = {f.name for f in dataclasses.fields(RunConfig)}
            bad |= {f"run.{k}" for k in set(run) - rnames}
            if "n_levels" not in run:
                bad.add("run.n_levels")
        if isinstance(direct, dict):
            bad |= {f"direct.{k}" for k in set(direct) - DIRECT_KEYS}
        if bad:
            raise SchemaError(bad, "unknown or missing config keys")
        kw = dict(d)
        if kw["mode"] not in MODES:
            raise SchemaError(["mode"], f"mode must be one of {MODES}")
        for key, build in (("run", RunConfig.from_dict), ("model", MultitypeModel.from_dict)):
            if kw.get(key) is not None:
                try:
                    kw[key] = build(kw[key])
                except (TypeError, ArgumentError) as exc:
                    raise SchemaError([key], str(exc)) from exc
        exp = cls(**kw)
        exp.validate()
        return exp

    def validate(self):
        missing = []
        if self.mode == "direct":
            if self.direct is None:
                missing.append("direct")
            else:
                missing += [f"direct.{k}" for k in ("T",) if k not in self.direct]
        else:
            if self.run is None:
                missing.append("run")
        if self.mode == "multitype" and self.model is None:
            missing.append("model")
        if missing:
            raise SchemaError(missing, "missing keys for mode " + self.mode)
        if int(self.replicas) < 1:
            raise SchemaError(["replicas"], "replicas must be >= 1")
        if int(self.workers) < 1:
            raise SchemaError(["workers"], "workers must be >= 1")
        if self.run is not None:
            try:
                self.run.validate()
            except ArgumentError as exc:
                raise SchemaError(["run"], str(exc)) from exc
        if self.mode == "project-compare" and self.run.clock != "t":
            raise SchemaError(["run.horizon_t"], "project-compare needs a t-clock horizon")
        if self.mode == "mgtest":
            if self.run.clock != "s":
                raise SchemaError(["run.horizon_s"], "mgtest needs an s-clock horizon")
            for name in self.functions:
                if name not in mgcheck.BUILTINS:
                    raise SchemaError(["functions"], f"unknown test function {name}")

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, RunConfig):
                v = v.to_dict()
            elif isinstance(v, MultitypeModel):
                v = v.to_dict()
            d[f.name] = v
        return d


def load_experiment(path) -> Experiment:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(["<json>"], f"malformed JSON: {exc}") from exc
    return Experiment.from_dict(d)


# ---- replica workers ---------------------------------------------------------

def _chunks(n, k):
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [list(range(bounds[i], bounds[i + 1])) for i in range(k) if bounds[i] < bounds[i + 1]]


def _parallel(fn, exp: Experiment, replicas: int):
    """Apply ``fn(exp_dict, replica_list)`` over chunks, preserving replica order."""
    workers = min(int(exp.workers), replicas)
    payload = exp.to_dict()
    chunks = _chunks(replicas, workers)
    if workers <= 1:
        results = [fn(payload, ch) for ch in chunks]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(fn, [payload] * len(chunks), chunks))
    return [x for part in results for x in part]


def _engine_run(exp: Experiment, r: int, **kw):
    cfg = exp.run
    if exp.mode == "multitype" or (exp.model is not None and exp.mode != "lookdown"):
        st = cfg.initial_state(r, exp.model.types)
        return advance_multitype(st, cfg, exp.model, replica=r, **kw)
    return advance(cfg.initial_state(r), cfg, replica=r, **kw)


def _type_names(exp):
    return exp.model.types if exp.model is not None and exp.mode != "lookdown" else ("A", "B")


def _w_simulate(payload, reps):
    exp = Experiment.from_dict(payload)
    out = []
    for r in reps:
        tr = _engine_run(exp, r, output_times=exp.output_times, record_states=exp.snapshots)
        snaps = None
        if exp.snapshots:
            snaps = [st.to_json_dict(_type_names(exp)) for st in tr.states]
        out.append({"s": tr.s, "t": tr.t, "zeta": tr.zeta, "muA": tr.muA,
                    "stop": tr.stop, "snaps": snaps})
    return out


def _w_validate(payload, reps):
    exp = Experiment.from_dict(payload)
    cfg = dataclasses.replace(exp.run, check_ultrametric=True, track_R=True)
    exp.run = cfg
    times = exp.output_times or list(np.linspace(0.0, cfg.horizon, 6))
    out = []
    for r in reps:
        tr = _engine_run(exp, r, output_times=times, record_states=True, record_path=True)
        um_fail = sum(not genealogy.check_ultrametric(st.R).passed for st in tr.states)
        mu_fail = sum(abs(st.muA - m) > 0 for st, m in zip(tr.states, tr.muA))
        band_fail = sum(st.stop is None and not (1 / cfg.M < st.zeta < cfg.M) for st in tr.states)
        sym_fail = sum(not (np.array_equal(st.R, st.R.T) and np.all(np.diag(st.R) == 0)
                            and np.all(st.R >= -1e-12)) for st in tr.states)
        # the path starts after the first substep; prepend the initial point
        z0 = cfg.initial_state(r, _type_names(exp)).zeta
        P = tr.path
        t_trap = float(np.trapezoid(np.r_[z0, P[:, 1]], np.r_[0.0, P[:, 0]]))
        clock_err = abs(tr.final.t_accum - t_trap) / max(tr.final.t_accum, 1e-300)
        out.append({"checks": tr.checks, "fails": tr.check_failures, "um_fail": um_fail,
                    "mu_fail": mu_fail, "band_fail": band_fail, "sym_fail": sym_fail,
                    "clock_err": clock_err})
    return out


def _w_mgtest(payload, reps):
    exp = Experiment.from_dict(payload)
    fns = [mgcheck.builtin(name, exp.run.M) for name in exp.functions]
    res = mgcheck.residual_samples(exp.run, fns, exp.delta_s, reps, exp.s0, exp.n_sub)
    return [{name: float(res[name][i]) for name in res} for i in range(len(reps))]


def _w_project(payload, reps):
    exp = Experiment.from_dict(payload)
    out = []
    for r in reps:
        tr = advance(exp.run.initial_state(r), exp.run, replica=r)
        out.append({"xiA": float(tr.xiA[0]), "xiB": float(tr.xiB[0]),
                    "intA": float(tr.int_xiA[0]), "intAB": float(tr.int_xiAxiB[0])})
    return out


def _w_tree(payload, reps):
    exp = Experiment.from_dict(payload)
    out = []
    for r in reps:
        tr = _engine_run(exp, r)
        st = tr.final
        tree = genealogy.ultrametric_to_tree(st.R)
        nwk = tree.to_newick()
        back = genealogy.tree_to_matrix(genealogy.parse_newick(nwk), list(range(1, st.n + 1)))
        scale = max(float(st.R.max()), 1e-300)
        ok = bool(np.max(np.abs(back - st.R)) <= 1e-9 * scale)
        k = min(exp.sample_k, st.n)
        smp = genealogy.sample_marked_matrices(st, k, exp.sample_m, exp.run.seed, replica=r)
        out.append({"newick": nwk, "roundtrip": ok,
                    "samples": [s.to_json_dict(_type_names(exp)) for s in smp]})
    return out


def _w_fragments(payload, reps):
    exp = Experiment.from_dict(payload)
    cfg = exp.run
    if exp.model is not None:
        marks, cap = exp.model.marks(), exp.model.cap(cfg.M)
    else:
        from .engine import _twotype_rules
        rules = _twotype_rules(cfg)
        marks, cap = rules.marks, rules.cap
    horizon = cfg.horizon
    probes = exp.probe_times or list(np.linspace(0.0, horizon, 5))
    out = []
    for r in reps:
        src = EventSource(cfg.n_levels, cfg.seed, r, cap_C=cap if marks else 0.0,
                          marks=marks if marks else ("beta",))
        ev = src.window(0.0, horizon)
        masses = genealogy.fragment_masses(ev, None, (0.0, horizon), probes)
        rows = [(k[0], k[1], p, float(m[i])) for k, m in sorted(masses.items())
                for i, p in enumerate(probes) if m[i] > 0]
        sums = np.zeros(len(probes))
        for m in masses.values():
            sums += m
        out.append({"rows": rows, "sum_err": float(np.max(np.abs(sums - 1.0))) if len(probes) else 0.0})
    return out


# ---- output helpers ----------------------------------------------------------

def _stat(name, estimate, se=None, target=None, passed=None) -> dict:
    return {"name": name, "estimate": None if estimate is None else float(estimate),
            "se": None if se is None else float(se),
            "target": None if target is None else float(target),
            "pass": None if passed is None else bool(passed)}


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _mean_stat(name, x, sigmas=None, target=None):
    x = np.asarray(x, float)
    if len(x) >= 2:
        m, se = mean_se(x)
    else:
        m, se = float(x.mean()), None
    passed = None
    if target is not None and se is not None:
        passed = abs(m - target) <= sigmas * se
    return _stat(name, m, se, target, passed)


# ---- subcommand bodies -----------------------------------------------------------

def run(exp: Experiment, outdir: Path) -> dict:
    """Execute an experiment, write its files and return the report."""
    outdir.mkdir(parents=True, exist_ok=True)
    R = int(exp.replicas)
    stats = []
    mode = exp.mode
    if mode == "direct":
        d = exp.direct
        dt = float(d.get("dt_t", 1e-3))
        T = float(d["T"])
        times = exp.output_times or list(np.linspace(0.0, T, 11))
        idx = np.rint(np.asarray(times) / dt).astype(int)
        rows = []
        endA, endB = [], []
        for r in range(R):
            p = simulate_direct(d.get("xA0", 1.0), d.get("xB0", 0.0), d.get("b", 0.0),
                                d.get("c", 0.0), dt, T, d.get("seed", 0), replica=r)
            for k in idx:
                rows.append((r, float(p.times_t[k]), float(p.xiA[k]), float(p.xiB[k])))
            endA.append(p.xiA[-1])
            endB.append(p.xiB[-1])
        _write_csv(outdir / "trajectories.csv", ["replica", "t", "xiA", "xiB"], rows)
        stats += [_mean_stat("xiA(T)", endA), _mean_stat("xiB(T)", endB)]
    elif mode in ("lookdown", "multitype") and exp._sub == "simulate":
        res = _parallel(_w_simulate, exp, R)
        rows = []
        snaps = []
        for r, x in enumerate(res):
            for k in range(len(x["s"])):
                mu, z = float(x["muA"][k]), float(x["zeta"][k])
                rows.append((r, float(x["s"][k]), float(x["t"][k]), z, mu, z * mu, z * (1 - mu),
                             STOP_NAMES[int(x["stop"][k])] or "none"))
            if x["snaps"] is not None:
                snaps += [dict(replica=r, **s) for s in x["snaps"]]
        _write_csv(outdir / "trajectory.csv",
                   ["replica", "s", "t", "zeta", "muA", "xiA", "xiB", "stop"], rows)
        if exp.snapshots:
            with open(outdir / "snapshots.jsonl", "w") as fh:
                for s in snaps:
                    fh.write(json.dumps(s, sort_keys=True) + "\n")
        last = [x["zeta"][-1] for x in res], [x["muA"][-1] for x in res]
        stats += [_mean_stat("zeta(final)", last[0]), _mean_stat("muA(final)", last[1])]
    elif mode in ("lookdown", "multitype"):  # validate
        res = _parallel(_w_validate, exp, R)
        keys = ("checks", "fails", "um_fail", "mu_fail", "band_fail", "sym_fail", "clock_err")
        _write_csv(outdir / "checks.csv", ("replica",) + keys,
                   [(r,) + tuple(x[k] for k in keys) for r, x in enumerate(res)])
        checks = sum(x["checks"] for x in res)
        fails = sum(x["fails"] for x in res)
        stats += [
            _stat("ultrametric_post_event_failures", fails, None, 0, fails == 0 and checks > 0),
            _stat("ultrametric_post_event_checks", checks),
            _stat("ultrametric_snapshot_failures", sum(x["um_fail"] for x in res), None, 0,
                  sum(x["um_fail"] for x in res) == 0),
            _stat("muA_mismatches", sum(x["mu_fail"] for x in res), None, 0,
                  sum(x["mu_fail"] for x in res) == 0),
            _stat("band_violations", sum(x["band_fail"] for x in res), None, 0,
                  sum(x["band_fail"] for x in res) == 0),
            _stat("matrix_shape_violations", sum(x["sym_fail"] for x in res), None, 0,
                  sum(x["sym_fail"] for x in res) == 0),
            _stat("clock_max_rel_error", max(x["clock_err"] for x in res), None, 0,
                  max(x["clock_err"] for x in res) <= 1e-9),
        ]
    elif mode == "mgtest":
        res = _parallel(_w_mgtest, exp, R)
        reps = []
        for name in exp.functions:
            x = np.array([row[name] for row in res])
            rep = mgcheck._report(name, exp.delta_s, x, exp.s0)
            rep.sigmas = exp.sigmas
            reps.append(rep.to_dict())
            stats.append(_stat(f"residual[{name}]", rep.mean, rep.se, 0.0,
                               rep.passed if R >= 2 else None))
        _write_json(outdir / "residuals.json", reps)
    elif mode == "project-compare":
        res = _parallel(_w_project, exp, R)
        cfg = exp.run
        d = exp.direct or {}
        xA0, xB0 = cfg.v0 * cfg.muA0, cfg.v0 * (1 - cfg.muA0)
        ens = simulate_direct_ensemble(xA0, xB0, cfg.b, cfg.c, float(d.get("dt_t", 1e-3)),
                                       [cfg.horizon_t], R, int(d.get("seed", cfg.seed + 1)))
        look = {k: np.array([x[k] for x in res]) for k in ("xiA", "xiB", "intA", "intAB")}
        look["xiAxiB"] = look["xiA"] * look["xiB"]
        dirc = {"xiA": ens.xiA[:, 0], "xiB": ens.xiB[:, 0]}
        dirc["xiAxiB"] = dirc["xiA"] * dirc["xiB"]
        rows = [(r, look["xiA"][r], look["xiB"][r], dirc["xiA"][r], dirc["xiB"][r]) for r in range(R)]
        _write_csv(outdir / "moments.csv",
                   ["replica", "xiA_lookdown", "xiB_lookdown", "xiA_direct", "xiB_direct"], rows)
        if R >= 2:
            for k in ("xiA", "xiB", "xiAxiB"):
                t = two_sample_mean_test(look[k], dirc[k], exp.sigmas, k) if R >= 30 else None
                if t is None:
                    stats.append(_mean_stat(f"E[{k}] lookdown - direct", look[k] - dirc[k]))
                else:
                    stats.append(_stat(f"E[{k}] lookdown - direct", t.estimate, t.se, 0.0, t.passed))
            MA = look["xiA"] - xA0 - (cfg.b * look["intA"] - cfg.c * look["intAB"])
            gap = MA**2 - look["intA"]
            stats.append(_mean_stat("E[M_A^2 - int xiA]", gap, exp.sigmas, 0.0 if R >= 30 else None))
    elif mode == "export-tree":
        res = _parallel(_w_tree, exp, R)
        with open(outdir / "trees.nwk", "w") as fh:
            for x in res:
                fh.write(x["newick"] + "\n")
        _write_json(outdir / "matrices.json", [x["samples"] for x in res])
        bad = sum(not x["roundtrip"] for x in res)
        stats.append(_stat("newick_roundtrip_failures", bad, None, 0, bad == 0))
    elif mode == "fragments":
        res = _parallel(_w_fragments, exp, R)
        rows = [(r,) + row for r, x in enumerate(res) for row in x["rows"]]
        _write_csv(outdir / "fragments.csv",
                   ["replica", "root_time", "root_level", "probe_time", "mass"], rows)
        err = max(x["sum_err"] for x in res)
        stats.append(_stat("mass_sum_max_error", err, None, 0, err <= 1e-12))
    flags = [s["pass"] for s in stats if s["pass"] is not None]
    report = {"mode": mode, "replicas": R, "statistics": stats, "pass": all(flags)}
    _write_json(outdir / "report.json", report)
    return report


# ---- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lookdown", description="Lookdown simulations and checks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="JSON experiment file")
        sp.add_argument("-o", "--output-dir", default=None,
                        help=f"output directory (default ${ENV_OUTPUT} or ./lookdown_out)")
        sp.add_argument("--seed", type=int, default=None, help="override the run seed")
        sp.add_argument("--replicas", type=int, default=None, help="override the replica count")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        exp = load_experiment(args.config)
        allowed = SUBCOMMANDS[args.command]
        if exp.mode not in allowed:
            raise SchemaError(["mode"], f"subcommand {args.command} accepts modes {allowed}")
        if args.seed is not None:
            if exp.run is not None:
                exp.run = dataclasses.replace(exp.run, seed=args.seed)
            if exp.direct is not None:
                exp.direct = dict(exp.direct, seed=args.seed)
        if args.replicas is not None:
            exp.replicas = args.replicas
        exp.validate()
        exp._sub = args.command
        outdir = Path(args.output_dir or os.environ.get(ENV_OUTPUT) or "lookdown_out")
        report = run(exp, outdir)
    except (SchemaError, ArgumentError) as exc:
        print(f"lookdown: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"lookdown: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for s in report["statistics"]:
        flag = "" if s["pass"] is None else (" PASS" if s["pass"] else " FAIL")
        se = "" if s["se"] is None else f" +/- {s['se']:.3g}"
        print(f"{s['name']}: {s['estimate']:.6g}{se}{flag}")
    return EXIT_OK if report["pass"] else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
