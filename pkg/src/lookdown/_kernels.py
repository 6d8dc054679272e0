"""Compiled inner loop of the lookdown engine.

State layout (all arrays are mutated in place)::

    sf[0] s        sf[1] zeta     sf[2] W (Brownian value at s)
    sf[3] t        sf[4] I_A      sf[5] I_B     sf[6] I_AB
    si[0] stop     si[1] kgrid    si[2] bridge cursor
    si[3] checks   si[4] failed   si[5] path cursor
    si[6] applied  si[7] output cursor

``Rt`` holds the distance matrix in offset form: for physical rows
``p != q`` the distance is ``Rt[p, q] + 2 t``, so the continuous growth
``dR = 2 zeta ds`` costs nothing and a reset to zero writes ``-2 t``.
``slot[level]`` maps a 0-based level to its physical row, which makes the
neutral level shift an O(n) permutation of ``slot`` plus one row copy.

Type codes: the two-type engine uses 0 = A and 1 = B; the multitype engine
uses indices into the model's type list. ``counts`` holds per-type level
counts and is updated incrementally.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

STOP_NONE = 0
STOP_LOWER = 1
STOP_UPPER = 2

MODE_TWOTYPE = 0
MODE_MULTI = 1

# path record columns
P_S, P_ZETA, P_T, P_R12, P_FLAG = 0, 1, 2, 3, 4
# output record columns
LAND_ITERS = 12
LAND_TOL = 1e-14

O_S, O_ZETA, O_T, O_IA, O_IB, O_IAB, O_MU, O_STOP = 0, 1, 2, 3, 4, 5, 6, 7

# error codes returned by run_window
OK = 0
ERR_BRIDGE = 1
ERR_PATH = 2

_SLACK = 1e-12


@njit(cache=True)
def rank_of(w, m):
    """1-based rank ceil(w m); w = 0 maps to 1."""
    r = int(math.ceil(w * m * (1.0 - _SLACK)))
    if r < 1:
        r = 1
    if r > m:
        r = m
    return r


@njit(cache=True)
def drift_f(v, p, b, c, M):
    if v < 1.0 / M:
        v = 1.0 / M
    elif v > M:
        v = M
    return b * p * v - 2.0 * c * p * (1.0 - p) * v * v


@njit(cache=True)
def _record_path(path, si, sf, Rt, slot, flag):
    k = si[5]
    if k >= path.shape[0]:
        return False
    t = sf[3]
    path[k, P_S] = sf[0]
    path[k, P_ZETA] = sf[1]
    path[k, P_T] = t
    if slot.shape[0] > 1:
        path[k, P_R12] = Rt[slot[0], slot[1]] + 2.0 * t
    else:
        path[k, P_R12] = 0.0
    path[k, P_FLAG] = flag
    si[5] = k + 1
    return True


@njit(cache=True)
def _substep(s_new, sf, si, wg, k0, base, dt, bridge, a1, a2, mu, ito, M, g_next):
    """Advance zeta from sf[0] to s_new (<= next grid point g_next)."""
    s = sf[0]
    ds = s_new - s
    if ds <= 0.0:
        return OK
    if s_new >= g_next:
        s_new = g_next
        w_new = wg[si[1] + 1 - k0]
        si[1] += 1
    else:
        j = si[2]
        if j >= bridge.shape[0]:
            return ERR_BRIDGE
        si[2] = j + 1
        wg_next = wg[si[1] + 1 - k0]
        h = g_next - s
        frac = ds / h
        w = sf[2]
        var = ds * (g_next - s_new) / h
        if var < 0.0:
            var = 0.0
        w_new = w + frac * (wg_next - w) + math.sqrt(var) * bridge[j]
    ds = s_new - s
    z = sf[1]
    v = z
    if v < 1.0 / M:
        v = 1.0 / M
    elif v > M:
        v = M
    f = a1 * v - a2 * v * v
    z_new = z * math.exp((f - ito) * ds + (w_new - sf[2]))
    half = 0.5 * ds
    sf[3] += half * (z + z_new)
    z2 = z * z
    zn2 = z_new * z_new
    sf[4] += half * (z2 + zn2) * mu
    sf[5] += half * (z2 + zn2) * (1.0 - mu)
    sf[6] += half * (z2 * z + zn2 * z_new) * mu * (1.0 - mu)
    sf[0] = s_new
    sf[1] = z_new
    sf[2] = w_new
    if z_new <= 1.0 / M:
        si[0] = STOP_LOWER
    elif z_new >= M:
        si[0] = STOP_UPPER
    return OK


@njit(cache=True)
def copy_row(Rt, p, q, t):
    """Physical row p becomes a copy of row q, and R(p, q) = 0."""
    n = Rt.shape[0]
    for x in range(n):
        Rt[p, x] = Rt[q, x]
        Rt[x, p] = Rt[x, q]
    Rt[p, q] = -2.0 * t
    Rt[q, p] = -2.0 * t
    Rt[p, p] = -2.0 * t


@njit(cache=True)
def neutral_update(Rt, slot, G, counts, i0, j0, t, track_R):
    n = G.shape[0]
    counts[G[n - 1]] -= 1
    for l in range(n - 1, j0, -1):
        G[l] = G[l - 1]
    G[j0] = G[i0]
    counts[G[j0]] += 1
    if track_R:
        p = slot[n - 1]
        for l in range(n - 1, j0, -1):
            slot[l] = slot[l - 1]
        slot[j0] = p
        copy_row(Rt, p, slot[i0], t)


@njit(cache=True)
def selective_update(Rt, slot, G, counts, l0, k0, t, track_R):
    if l0 == k0:
        return
    counts[G[l0]] -= 1
    G[l0] = G[k0]
    counts[G[l0]] += 1
    if track_R:
        copy_row(Rt, slot[l0], slot[k0], t)


@njit(cache=True)
def ultrametric_ok(Rt, slot, t):
    """Strong triangle inequality on the materialized matrix, tol 1e-9 * max."""
    n = slot.shape[0]
    mx = 0.0
    for a in range(n):
        for bb in range(a + 1, n):
            v = Rt[slot[a], slot[bb]] + 2.0 * t
            if v > mx:
                mx = v
    tol = 1e-9 * mx
    for a in range(n):
        pa = slot[a]
        for bb in range(a + 1, n):
            pb = slot[bb]
            d = Rt[pa, pb] - tol
            for k in range(n):
                if k == a or k == bb:
                    continue
                pk = slot[k]
                x = Rt[pa, pk]
                y = Rt[pk, pb]
                if (x if x > y else y) < d:
                    return False
    return True


# ---- two-type rules -------------------------------------------------------

@njit(cache=True)
def twotype_threshold(kind, g, cntA, n, zeta, b, c):
    mu = cntA / n
    if kind == 1:
        return b * mu * zeta
    if g == 0:
        return c * (1.0 - mu) * zeta * zeta
    return c * mu * zeta * zeta


@njit(cache=True)
def twotype_bound(kind, g, cntA, n, b, c, M):
    return twotype_threshold(kind, g, cntA, n, M, b, c)


@njit(cache=True)
def twotype_parent(kind, w, G, cntA):
    n = G.shape[0]
    if kind == 1:
        r = rank_of(w, cntA)
        seen = 0
        for k in range(n):
            if G[k] == 0:
                seen += 1
                if seen == r:
                    return k
        return -1
    return rank_of(w, n) - 1


# ---- multitype rules ------------------------------------------------------

@njit(cache=True)
def multi_avg_b(counts, bvec, n):
    acc = 0.0
    for h in range(counts.shape[0]):
        acc += counts[h] * bvec[h]
    return acc / n


@njit(cache=True)
def multi_c_of(h, counts, cmat, n):
    acc = 0.0
    for h2 in range(counts.shape[0]):
        acc += cmat[h, h2] * counts[h2]
    return acc / n


@njit(cache=True)
def multi_avg_c(counts, cmat, n):
    acc = 0.0
    for h in range(counts.shape[0]):
        if counts[h] > 0:
            acc += counts[h] * multi_c_of(h, counts, cmat, n)
    return acc / n


@njit(cache=True)
def multi_threshold(kind, g, counts, n, zeta, bvec, cmat):
    if kind == 1:
        return multi_avg_b(counts, bvec, n) * zeta
    if kind == 2:
        return multi_c_of(g, counts, cmat, n) * zeta * zeta
    return zeta


@njit(cache=True)
def multi_size_biased(w, G, bvec):
    n = G.shape[0]
    total = 0.0
    for k in range(n):
        total += bvec[G[k]]
    target = w * total * (1.0 - _SLACK)
    cum = 0.0
    last = -1
    for k in range(n):
        bk = bvec[G[k]]
        if bk > 0.0:
            cum += bk
            last = k
            if cum >= target:
                return k
    return last


@njit(cache=True)
def quantile_index(w, probs):
    target = w * (1.0 - _SLACK)
    cum = 0.0
    last = -1
    for h in range(probs.shape[0]):
        p = probs[h]
        if p > 0.0:
            cum += p
            last = h
            if cum >= target:
                return h
    return last


# ---- main loop ------------------------------------------------------------

@njit(cache=True)
def _record_out(out, out_G, out_R, rec_full, idx, sf, si, G, counts, Rt, slot, n):
    out[idx, O_S] = sf[0]
    out[idx, O_ZETA] = sf[1]
    out[idx, O_T] = sf[3]
    out[idx, O_IA] = sf[4]
    out[idx, O_IB] = sf[5]
    out[idx, O_IAB] = sf[6]
    out[idx, O_MU] = counts[0] / n
    out[idx, O_STOP] = si[0]
    if rec_full:
        t = sf[3]
        for a in range(n):
            out_G[idx, a] = G[a]
        if out_R.shape[1] == n:
            for a in range(n):
                out_R[idx, a, a] = 0.0
                for bb in range(a + 1, n):
                    v = Rt[slot[a], slot[bb]] + 2.0 * t
                    out_R[idx, a, bb] = v
                    out_R[idx, bb, a] = v


@njit(cache=True)
def run_window(mode, sf, si, Rt, slot, G, counts,
               ev_t, ev_k, ev_a, ev_b, ev_z, ev_w,
               wg, k0, base, dt, s_end, bridge,
               b, c, bvec, cmat, ell, M, ito, track_R, check,
               out_times, out_clock, out, out_G, out_R, rec_full,
               path, rec_path):
    """Evolve the state over [sf[0], s_end) consuming the window's events.

    Returns an error code; the caller inspects si[0] for stopping.
    """
    n = G.shape[0]
    ne = ev_t.shape[0]
    n_out = out_times.shape[0]
    ie = 0
    n_land = 0
    while si[0] == STOP_NONE:
        s = sf[0]
        # outputs due now
        op = si[7]
        if op < n_out:
            if out_clock == 0 and out_times[op] <= s:
                _record_out(out, out_G, out_R, rec_full, op, sf, si, G, counts, Rt, slot, n)
                si[7] = op + 1
                continue
            if out_clock == 1 and out_times[op] <= sf[3]:
                _record_out(out, out_G, out_R, rec_full, op, sf, si, G, counts, Rt, slot, n)
                si[7] = op + 1
                n_land = 0
                continue
        # discard potential atoms that cannot activate while zeta < M
        while ie < ne and ev_k[ie] != 0:
            kind = ev_k[ie]
            lvl = ev_a[ie] - 1
            if mode == MODE_TWOTYPE:
                bound = twotype_bound(kind, G[lvl], counts[0], n, b, c, M)
            else:
                bound = multi_threshold(kind, G[lvl], counts, n, M, bvec, cmat)
            if ev_z[ie] > bound:
                ie += 1
            else:
                break
        # events due now
        if ie < ne and ev_t[ie] <= s:
            kind = ev_k[ie]
            t = sf[3]
            applied = False
            touches12 = False
            if kind == 0:
                i0 = ev_a[ie] - 1
                j0 = ev_b[ie] - 1
                neutral_update(Rt, slot, G, counts, i0, j0, t, track_R)
                applied = True
                touches12 = j0 <= 1
            else:
                l0 = ev_a[ie] - 1
                z = ev_z[ie]
                w = ev_w[ie]
                if mode == MODE_TWOTYPE:
                    thr = twotype_threshold(kind, G[l0], counts[0], n, sf[1], b, c)
                    if z <= thr and thr > 0.0:
                        k = twotype_parent(kind, w, G, counts[0])
                        selective_update(Rt, slot, G, counts, l0, k, t, track_R)
                        applied = True
                        touches12 = l0 <= 1
                else:
                    thr = multi_threshold(kind, G[l0], counts, n, sf[1], bvec, cmat)
                    if z <= thr and thr > 0.0:
                        applied = True
                        if kind == 3:
                            h_new = quantile_index(w, ell[G[l0]])
                            counts[G[l0]] -= 1
                            G[l0] = h_new
                            counts[h_new] += 1
                        else:
                            if kind == 1:
                                k = multi_size_biased(w, G, bvec)
                            else:
                                k = rank_of(w, n) - 1
                            selective_update(Rt, slot, G, counts, l0, k, t, track_R)
                            touches12 = l0 <= 1
            ie += 1
            if applied:
                si[6] += 1
                if check and track_R:
                    si[3] += 1
                    if not ultrametric_ok(Rt, slot, sf[3]):
                        si[4] += 1
                if rec_path:
                    if not _record_path(path, si, sf, Rt, slot, 1.0 if touches12 else 2.0):
                        return ERR_PATH
            continue
        if s >= s_end:
            break
        # one substep
        g_next = base + (si[1] + 1) * dt
        s_new = g_next
        if s_end < s_new:
            s_new = s_end
        if ie < ne and ev_t[ie] < s_new:
            s_new = ev_t[ie]
        landing = False
        if op < n_out:
            if out_clock == 0:
                if out_times[op] < s_new:
                    s_new = out_times[op]
            else:
                # shrink the landing step so it rarely overshoots, then iterate
                ds_l = (out_times[op] - sf[3]) / sf[1]
                ds_l *= max(0.5, 1.0 - 4.0 * math.sqrt(ds_l))
                land = s + ds_l
                if land < s_new:
                    s_new = land
                    landing = True
                    if land <= s:
                        # below float resolution in s: record as is
                        _record_out(out, out_G, out_R, rec_full, op, sf, si, G, counts, Rt, slot, n)
                        si[7] = op + 1
                        n_land = 0
                        continue
        if mode == MODE_TWOTYPE:
            mu = counts[0] / n
            a1 = b * mu
            a2 = 2.0 * c * mu * (1.0 - mu)
        else:
            mu = counts[0] / n
            a1 = multi_avg_b(counts, bvec, n)
            a2 = multi_avg_c(counts, cmat, n)
        err = _substep(s_new, sf, si, wg, k0, base, dt, bridge, a1, a2, mu, ito, M, g_next)
        if err != OK:
            return err
        if rec_path:
            if not _record_path(path, si, sf, Rt, slot, 0.0):
                return ERR_PATH
        if landing and si[0] == STOP_NONE and si[7] < n_out:
            n_land += 1
            target = out_times[si[7]]
            if abs(target - sf[3]) <= LAND_TOL * max(1.0, target) or n_land >= LAND_ITERS:
                _record_out(out, out_G, out_R, rec_full, si[7], sf, si, G, counts, Rt, slot, n)
                si[7] += 1
                n_land = 0
    return OK
