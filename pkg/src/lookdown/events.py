"""Poisson event streams driving the lookdown particle system.

Two families of atoms are produced:

* neutral arrows ``(s, i, j)`` with ``i < j``, one rate-1 process per pair;
* potential atoms ``(s, level, z, w, mark)`` with activation level ``z``
  uniform on ``[0, cap_C]`` and sampling seed ``w`` uniform on ``[0, 1]``,
  one rate-``cap_C`` process per level and mark.

Levels are 1-based throughout. Streams are stored column-wise in numpy
arrays; ``EventStream.atoms`` gives the record view.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import rng as _rng
from .errors import ArgumentError

KIND_NEUTRAL = 0
BETA = 1
DELTA = 2
LAMBDA = 3

MARK_CODES = {"beta": BETA, "delta": DELTA, "lambda": LAMBDA}
MARK_NAMES = {v: k for k, v in MARK_CODES.items()}


@dataclass(frozen=True)
class NeutralAtom:
    time_s: float
    i: int
    j: int

    def __post_init__(self):
        if not (1 <= self.i < self.j):
            raise ArgumentError(f"neutral atom needs 1 <= i < j, got ({self.i}, {self.j})")
        if self.time_s < 0:
            raise ArgumentError("time_s must be nonnegative")


@dataclass(frozen=True)
class PotentialAtom:
    time_s: float
    level: int
    z: float
    w: float
    mark: str

    def __post_init__(self):
        if self.mark not in MARK_CODES:
            raise ArgumentError(f"unknown mark {self.mark!r}")
        if self.level < 1:
            raise ArgumentError("level must be >= 1")
        if not 0.0 <= self.w <= 1.0:
            raise ArgumentError("w must lie in [0, 1]")
        if self.z < 0:
            raise ArgumentError("z must be nonnegative")


def _empty(n):
    return (
        np.empty(n, np.float64),
        np.empty(n, np.int64),
        np.empty(n, np.int64),
        np.empty(n, np.int64),
        np.empty(n, np.float64),
        np.empty(n, np.float64),
    )


@dataclass
class EventStream:
    """Time-ordered atoms on ``[start, horizon)``.

    ``kind`` is 0 for neutral arrows and the mark code for potential atoms.
    ``a``/``b`` hold ``(i, j)`` for arrows and ``(level, 0)`` for potential
    atoms. ``z`` and ``w`` are NaN on arrows.
    """

    time: np.ndarray
    kind: np.ndarray
    a: np.ndarray
    b: np.ndarray
    z: np.ndarray
    w: np.ndarray
    horizon: float
    n_levels: int
    cap_C: float = 0.0
    start: float = 0.0
    marks: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.time)

    @classmethod
    def empty(cls, n_levels, horizon, cap_C=0.0, start=0.0, marks=()):
        return cls(*_empty(0), horizon=float(horizon), n_levels=int(n_levels),
                   cap_C=float(cap_C), start=float(start), marks=tuple(marks))

    @classmethod
    def from_atoms(cls, atoms: Iterable, n_levels, horizon, cap_C=0.0, start=0.0):
        """Build a stream from atom records (sorted on the way in)."""
        atoms = list(atoms)
        t, k, a, b, z, w = _empty(len(atoms))
        marks = set()
        for idx, atom in enumerate(atoms):
            t[idx] = atom.time_s
            if isinstance(atom, NeutralAtom):
                k[idx], a[idx], b[idx] = KIND_NEUTRAL, atom.i, atom.j
                z[idx] = w[idx] = np.nan
            else:
                k[idx], a[idx], b[idx] = MARK_CODES[atom.mark], atom.level, 0
                z[idx], w[idx] = atom.z, atom.w
                marks.add(atom.mark)
        out = cls(t, k, a, b, z, w, horizon=float(horizon), n_levels=int(n_levels),
                  cap_C=float(cap_C), start=float(start),
                  marks=tuple(sorted(marks, key=MARK_CODES.get)))
        out._sort()
        return out

    def _sort(self):
        order = _tie_order(self.time, self.kind, self.a, self.b)
        for name in ("time", "kind", "a", "b", "z", "w"):
            setattr(self, name, getattr(self, name)[order])

    @property
    def atoms(self) -> list:
        out = []
        for t, k, a, b, z, w in zip(self.time, self.kind, self.a, self.b, self.z, self.w):
            if k == KIND_NEUTRAL:
                out.append(NeutralAtom(float(t), int(a), int(b)))
            else:
                out.append(PotentialAtom(float(t), int(a), float(z), float(w), MARK_NAMES[int(k)]))
        return out

    def neutral_only(self) -> "EventStream":
        sel = self.kind == KIND_NEUTRAL
        return self._select(sel, cap_C=0.0, marks=())

    def potential_only(self) -> "EventStream":
        return self._select(self.kind != KIND_NEUTRAL)

    def _select(self, sel, **over):
        kw = dict(horizon=self.horizon, n_levels=self.n_levels, cap_C=self.cap_C,
                  start=self.start, marks=self.marks)
        kw.update(over)
        return EventStream(self.time[sel], self.kind[sel], self.a[sel], self.b[sel],
                           self.z[sel], self.w[sel], **kw)

    def to_csv(self, fh=None) -> str:
        """Event-trace dump; returns the text and writes it to ``fh`` if given."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["kind", "time_s", "i", "j", "level", "z", "w", "mark"])
        for t, k, a, b, z, w in zip(self.time, self.kind, self.a, self.b, self.z, self.w):
            if k == KIND_NEUTRAL:
                wr.writerow(["neutral", _fmt(t), int(a), int(b), "", "", "", ""])
            else:
                wr.writerow(["potential", _fmt(t), "", "", int(a), _fmt(z), _fmt(w),
                             MARK_NAMES[int(k)]])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _tie_order(time, kind, a, b):
    # (time, stream kind, i, j/level, generation order)
    order = np.argsort(time)
    st = time[order]
    if len(st) > 1 and np.any(st[1:] == st[:-1]):
        stream_kind = (kind != KIND_NEUTRAL).astype(np.int64)
        key_i = np.where(kind == KIND_NEUTRAL, a, 0)
        key_jl = np.where(kind == KIND_NEUTRAL, b, a)
        order = np.lexsort((np.arange(len(time)), key_jl, key_i, stream_kind, time))
    return order


def _check_marks(marks) -> tuple:
    marks = tuple(sorted(set(marks), key=lambda m: MARK_CODES[m]))
    if not marks:
        raise ArgumentError("marks must be nonempty")
    return marks


class EventSource:
    """Lazy generator of the event streams of one replica, window by window.

    Each level owns its generators, so windows must be requested in time
    order and without gaps.
    """

    def __init__(self, n_levels: int, seed: int, replica: int = 0, cap_C: float = 0.0,
                 marks=("beta", "delta"), neutral: bool = True, start: float = 0.0):
        if n_levels < 1:
            raise ArgumentError("n_levels must be >= 1")
        if cap_C < 0:
            raise ArgumentError("cap_C must be nonnegative")
        self.n_levels = int(n_levels)
        self.cap_C = float(cap_C)
        self.marks = _check_marks(marks) if cap_C > 0 else tuple(marks)
        self._mark_codes = np.array([MARK_CODES[m] for m in self.marks], np.int64)
        self.neutral = neutral
        self._ngen = ([_rng.substream(seed, replica, _rng.NEUTRAL, j)
                       for j in range(2, self.n_levels + 1)] if neutral else [])
        self._pgen = ([_rng.substream(seed, replica, _rng.POTENTIAL, i)
                       for i in range(1, self.n_levels + 1)] if self.cap_C > 0 else [])
        self._cursor = float(start)

    def window(self, s0: float, s1: float) -> EventStream:
        if s1 < s0:
            raise ArgumentError("window end before start")
        if abs(s0 - self._cursor) > 1e-12 * max(1.0, abs(s0)):
            raise ArgumentError("windows must be requested contiguously")
        self._cursor = s1
        L = s1 - s0
        nt, ni, nj, nc = [], [], [], []
        pu, pl, pc = [], [], []
        if L > 0:
            for j, g in enumerate(self._ngen, start=2):
                cnt = g.poisson((j - 1) * L)
                if cnt:
                    u = g.random((2, cnt))
                    nt.append(u[0])
                    ni.append(u[1] * (j - 1))
                    nj.append(j)
                    nc.append(cnt)
            for level, g in enumerate(self._pgen, start=1):
                cnt = g.poisson(len(self._mark_codes) * self.cap_C * L)
                if cnt:
                    pu.append(g.random((4, cnt)))
                    pl.append(level)
                    pc.append(cnt)
        n_neu, n_pot = sum(nc), sum(pc)
        if n_neu + n_pot:
            k = len(self._mark_codes)
            t = np.empty(n_neu + n_pot)
            kind = np.zeros(n_neu + n_pot, np.int64)
            a = np.empty(n_neu + n_pot, np.int64)
            b = np.zeros(n_neu + n_pot, np.int64)
            z = np.full(n_neu + n_pot, np.nan)
            w = np.full(n_neu + n_pot, np.nan)
            if n_neu:
                t[:n_neu] = np.concatenate(nt)
                a[:n_neu] = 1 + np.minimum(np.concatenate(ni).astype(np.int64),
                                           np.repeat(np.array(nj) - 2, nc))
                b[:n_neu] = np.repeat(nj, nc)
            if n_pot:
                u = np.concatenate(pu, axis=1)
                t[n_neu:] = u[0]
                z[n_neu:] = self.cap_C * u[1]
                w[n_neu:] = u[2]
                kind[n_neu:] = self._mark_codes[np.minimum((u[3] * k).astype(np.int64), k - 1)]
                a[n_neu:] = np.repeat(pl, pc)
            t = s0 + L * t
            # float rounding of s0 + L*u must stay inside [s0, s1)
            np.minimum(t, np.nextafter(s1, -np.inf), out=t)
            cols = [t, kind, a, b, z, w]
        else:
            cols = list(_empty(0))
        out = EventStream(*cols, horizon=float(s1), n_levels=self.n_levels,
                          cap_C=self.cap_C, start=float(s0),
                          marks=self.marks if self.cap_C > 0 else ())
        out._sort()
        return out

    def windows(self, length: float, horizon: float | None = None) -> Iterator[EventStream]:
        """Consecutive windows of the given length, forever or up to ``horizon``."""
        s = self._cursor
        while horizon is None or s < horizon:
            e = s + length if horizon is None else min(s + length, horizon)
            yield self.window(s, e)
            s = e


def gen_neutral_events(n_levels: int, horizon: float, rng_seed: int, replica: int = 0) -> EventStream:
    """Rate-1 arrows for every pair ``i < j <= n_levels`` on ``[0, horizon)``."""
    if horizon < 0:
        raise ArgumentError("horizon must be nonnegative")
    return EventSource(n_levels, rng_seed, replica, cap_C=0.0).window(0.0, float(horizon))


def gen_potential_events(n_levels: int, horizon: float, cap_C: float, marks, rng_seed: int,
                         replica: int = 0) -> EventStream:
    """Potential atoms at rate ``cap_C`` per level and mark on ``[0, horizon)``."""
    if cap_C < 0:
        raise ArgumentError("cap_C must be nonnegative")
    if horizon < 0:
        raise ArgumentError("horizon must be nonnegative")
    marks = _check_marks(marks)
    src = EventSource(n_levels, rng_seed, replica, cap_C=cap_C, marks=marks, neutral=False)
    return src.window(0.0, float(horizon))


def merge_streams(a: EventStream, b: EventStream) -> EventStream:
    if a.n_levels != b.n_levels:
        raise ArgumentError("streams have different numbers of levels")
    if a.horizon != b.horizon or a.start != b.start:
        raise ArgumentError("streams cover different time windows")
    cols = [np.concatenate([getattr(a, c), getattr(b, c)])
            for c in ("time", "kind", "a", "b", "z", "w")]
    marks = tuple(sorted(set(a.marks) | set(b.marks), key=MARK_CODES.get))
    out = EventStream(*cols, horizon=a.horizon, n_levels=a.n_levels,
                      cap_C=max(a.cap_C, b.cap_C), start=a.start, marks=marks)
    out._sort()
    return out


def rate_cap(b: float, c: float, M: float, mutation: bool = False) -> float:
    """Per-level activation cap ``(b v c) M^2``, raised to ``M`` for mutation atoms."""
    cap = max(b, c) * M * M
    if mutation:
        cap = max(cap, M)
    return float(cap)
