"""Genealogical structure of a lookdown state.

Distances are twice the time back to the most recent common ancestor, so a
tree built from a distance matrix places internal nodes at height ``D / 2``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import squareform

from . import rng as _rng
from .errors import ArgumentError
from .events import KIND_NEUTRAL, EventStream


@dataclass
class UltrametricReport:
    passed: bool
    worst: tuple | None
    excess: float
    tol: float

    def __bool__(self):
        return self.passed


def _validate_square(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ArgumentError("matrix must be square")
    if not np.array_equal(D, D.T):
        raise ArgumentError("matrix must be symmetric")
    if np.any(np.diag(D) != 0):
        raise ArgumentError("matrix must have a zero diagonal")
    return D


def check_ultrametric(D, tol: float | None = None) -> UltrametricReport:
    """Strong triangle inequality ``max(D_ik, D_kj) >= D_ij - tol`` for all triples.

    ``tol`` defaults to ``1e-9`` times the largest entry. ``worst`` is the
    1-based triple ``(i, j, k)`` with the largest excess when the check fails.
    """
    D = _validate_square(D)
    n = len(D)
    if tol is None:
        tol = 1e-9 * (float(D.max()) if n else 0.0)
    best = -np.inf
    worst = None
    idx = np.arange(n)
    for k in range(n):
        via = np.maximum(D[:, k][:, None], D[k, :][None, :])
        gap = D - via
        gap[k, :] = -np.inf
        gap[:, k] = -np.inf
        gap[idx, idx] = -np.inf
        flat = int(np.argmax(gap))
        g = gap.flat[flat]
        if g > best:
            best = g
            i, j = divmod(flat, n)
            worst = (min(i, j) + 1, max(i, j) + 1, k + 1)
    passed = not (best > tol)
    return UltrametricReport(passed, None if passed else worst, float(max(best, 0.0)) if n > 2 else 0.0,
                             float(tol))


# ---- trees ------------------------------------------------------------------

@dataclass
class TreeNode:
    height: float
    children: list = field(default_factory=list)
    label: int | None = None

    @property
    def is_leaf(self):
        return not self.children

    def leaves(self) -> list:
        if self.is_leaf:
            return [self.label]
        out = []
        for ch in self.children:
            out.extend(ch.leaves())
        return out


@dataclass
class GenealogyTree:
    root: TreeNode

    @property
    def labels(self) -> list:
        return self.root.leaves()

    def to_newick(self) -> str:
        return _newick(self.root, None) + ";"


def ultrametric_to_tree(D, labels: Sequence | None = None, tol: float | None = None) -> GenealogyTree:
    """Exact tree of an ultrametric by single linkage; equal heights are merged."""
    rep = check_ultrametric(D, tol)
    if not rep.passed:
        raise ArgumentError(f"matrix is not ultrametric; violating triple {rep.worst}")
    D = np.asarray(D, float)
    n = len(D)
    if n == 0:
        raise ArgumentError("empty matrix")
    labels = list(range(1, n + 1)) if labels is None else list(labels)
    nodes = [TreeNode(0.0, label=labels[i]) for i in range(n)]
    if n == 1:
        return GenealogyTree(nodes[0])
    Z = linkage(squareform(D, checks=False), method="single")
    eps = 1e-12 * max(float(D.max()), 1e-300)
    for a, b, d, _ in Z:
        h = d / 2.0
        kids = []
        for idx in (int(a), int(b)):
            ch = nodes[idx]
            if not ch.is_leaf and abs(ch.height - h) <= eps:
                kids.extend(ch.children)
            else:
                kids.append(ch)
        nodes.append(TreeNode(h, kids))
    return GenealogyTree(nodes[-1])


def tree_to_matrix(tree: GenealogyTree, labels: Sequence | None = None) -> np.ndarray:
    """Distance matrix ``2 * height(LCA)`` in the order of ``labels``."""
    labels = tree.labels if labels is None else list(labels)
    pos = {lab: i for i, lab in enumerate(labels)}
    D = np.zeros((len(labels), len(labels)))

    def visit(node):
        if node.is_leaf:
            return [pos[node.label]]
        groups = [visit(ch) for ch in node.children]
        for x in range(len(groups)):
            for y in range(x + 1, len(groups)):
                ii = np.array(groups[x])[:, None]
                jj = np.array(groups[y])[None, :]
                D[ii, jj] = 2.0 * node.height
                D[jj.T, ii.T] = 2.0 * node.height
        return [i for g in groups for i in g]

    visit(tree.root)
    return D


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _newick(node: TreeNode, parent_height: float | None) -> str:
    if node.is_leaf:
        s = str(node.label)
    else:
        s = "(" + ",".join(_newick(ch, node.height) for ch in node.children) + ")"
    if parent_height is not None:
        s += ":" + _fmt(parent_height - node.height)
    return s


_TOKEN = re.compile(r"\s*([(),:;]|[^(),:;\s]+)")


def parse_newick(text: str) -> GenealogyTree:
    """Parse the Newick subset written by ``GenealogyTree.to_newick``.

    Leaf labels are kept as strings unless they are integers. Heights are
    recovered from branch lengths measured from the deepest leaf.
    """
    toks = [m.group(1) for m in _TOKEN.finditer(text.strip())]
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else None

    def take(expected=None):
        nonlocal pos
        if pos >= len(toks):
            raise ArgumentError("unexpected end of Newick string")
        tok = toks[pos]
        if expected is not None and tok != expected:
            raise ArgumentError(f"expected {expected!r}, found {tok!r}")
        pos += 1
        return tok

    def subtree():
        # returns (node, branch_length) with node.height temporarily = depth-to-leaves unknown
        if peek() == "(":
            take("(")
            kids = [subtree()]
            while peek() == ",":
                take(",")
                kids.append(subtree())
            take(")")
            node = TreeNode(0.0, [k for k in kids])
            if peek() not in (":", ",", ")", ";", None):
                take()  # internal label, ignored
        else:
            lab = take()
            if lab in "(),:;":
                raise ArgumentError(f"unexpected token {lab!r}")
            node = TreeNode(0.0, label=int(lab) if re.fullmatch(r"-?\d+", lab) else lab)
        length = 0.0
        if peek() == ":":
            take(":")
            try:
                length = float(take())
            except ValueError as exc:
                raise ArgumentError("malformed branch length") from exc
        node._len = length
        return node

    root = subtree()
    take(";")
    if pos != len(toks):
        raise ArgumentError("trailing characters after ';'")

    # depth from root, then height = max depth - depth
    depths = {}

    def walk(node, d):
        depths[id(node)] = d
        for ch in node.children:
            walk(ch, d + ch._len)

    walk(root, 0.0)
    top = max(depths.values())

    def fix(node):
        node.height = top - depths[id(node)] if node.children else 0.0
        for ch in node.children:
            fix(ch)
        if hasattr(node, "_len"):
            del node._len

    fix(root)
    return GenealogyTree(root)


# ---- marked samples -----------------------------------------------------------

@dataclass
class MarkedMatrixSample:
    k: int
    D: np.ndarray
    types: np.ndarray
    source_levels: np.ndarray

    def to_json_dict(self, type_names=("A", "B")) -> dict:
        return {"levels": [int(x) for x in self.source_levels],
                "types": [type_names[int(g)] for g in self.types],
                "D": [[float(x) for x in row] for row in self.D]}


def sample_marked_matrices(state, k: int, m: int, rng_seed, replica: int = 0) -> list:
    """``m`` samples of ``k`` distinct levels, drawn uniformly without replacement."""
    n = state.n
    if not 1 <= k <= n:
        raise ArgumentError(f"k={k} must lie in 1..{n}")
    gen = rng_seed if isinstance(rng_seed, np.random.Generator) else \
        _rng.substream(rng_seed, replica, _rng.SAMPLING)
    out = []
    for _ in range(m):
        lv = gen.choice(n, size=k, replace=False)
        out.append(MarkedMatrixSample(k, state.R[np.ix_(lv, lv)].copy(), state.G[lv].copy(), lv + 1))
    return out


def samples_to_json(samples, type_names=("A", "B")) -> str:
    return json.dumps([smp.to_json_dict(type_names) for smp in samples])


# ---- ancestry -----------------------------------------------------------------

def _neutral_arrays(neutral_events):
    if isinstance(neutral_events, EventStream):
        sel = neutral_events.kind == KIND_NEUTRAL
        return neutral_events.time[sel], neutral_events.a[sel], neutral_events.b[sel], \
            neutral_events.n_levels
    atoms = list(neutral_events)
    t = np.array([a.time_s for a in atoms], float)
    i = np.array([a.i for a in atoms], np.int64)
    j = np.array([a.j for a in atoms], np.int64)
    return t, i, j, None


def ancestor_level(neutral_events, T: float, s: float, j: int) -> int:
    """Level at time ``s`` of the ancestor of level ``j`` at time ``T``."""
    if s > T:
        raise ArgumentError("need s <= T")
    t, ii, jj, n = _neutral_arrays(neutral_events)
    if j < 1 or (n is not None and j > n):
        raise ArgumentError(f"level {j} outside 1..{n}")
    order = np.argsort(t, kind="stable")
    level = int(j)
    for e in order[::-1]:
        u = t[e]
        if u > T or u <= s:
            continue
        ell = jj[e]
        if level == ell:
            level = int(ii[e])
        elif level > ell:
            level -= 1
    return level


def fragment_masses(events: EventStream, neutral_events=None, window=(0.0, None),
                    probe_times=()) -> dict:
    """Empirical mass of each root's fragment at each probe time.

    A root is ``(0, i)`` for a level at the start of the window or
    ``(u, level)`` for a potential atom. Each level at a probe time belongs
    to the most recent root met along its neutral ancestral lineage. The
    result maps roots to arrays of level fractions over ``probe_times``;
    roots that never carry mass at a probe are omitted, except the
    time-zero roots, which are always present.
    """
    n = events.n_levels
    s0 = float(window[0])
    s_end = float(window[1]) if window[1] is not None else events.horizon
    if neutral_events is None:
        nt, ni, nj, _ = _neutral_arrays(events)
    else:
        nt, ni, nj, _ = _neutral_arrays(neutral_events)
    pot = events.kind != KIND_NEUTRAL
    pt, pl = events.time[pot], events.a[pot]
    # one merged backward timeline: (time, is_potential, a, b)
    times = np.concatenate([nt, pt])
    kind = np.concatenate([np.zeros(len(nt), np.int64), np.ones(len(pt), np.int64)])
    a = np.concatenate([ni, pl])
    b = np.concatenate([nj, np.zeros(len(pt), np.int64)])
    keep = (times >= s0) & (times <= s_end)
    times, kind, a, b = times[keep], kind[keep], a[keep], b[keep]
    order = np.lexsort((kind, times))
    times, kind, a, b = times[order], kind[order], a[order], b[order]
    probes = np.asarray(probe_times, float)
    masses: dict = {(s0, i): np.zeros(len(probes)) for i in range(1, n + 1)}
    for pidx, p in enumerate(probes):
        level = np.arange(1, n + 1)
        root_t = np.full(n, np.nan)
        root_l = np.zeros(n, np.int64)
        open_ = np.ones(n, bool)
        last = int(np.searchsorted(times, p, side="right"))
        for e in range(last - 1, -1, -1):
            if kind[e] == 1:
                hit = open_ & (level == a[e])
                if hit.any():
                    root_t[hit] = times[e]
                    root_l[hit] = a[e]
                    open_[hit] = False
                    if not open_.any():
                        break
            else:
                ell = b[e]
                jump = open_ & (level == ell)
                down = open_ & (level > ell)
                level[jump] = a[e]
                level[down] -= 1
        root_t[open_] = s0
        root_l[open_] = level[open_]
        for x in range(n):
            key = (float(root_t[x]), int(root_l[x]))
            if key not in masses:
                masses[key] = np.zeros(len(probes))
            masses[key][pidx] += 1.0 / n
    return masses
