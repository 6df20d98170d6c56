"""Numba kernels for the lattice steppers and reductions.

Every kernel that touches a whole field is written as a loop over row bands
(``nbands`` of them).  Each cell of the output depends only on the previous
level, so the partition never changes the stored values.  Per-row sums are
accumulated in a fixed eight-lane order and then combined by a pairwise tree
over rows, which makes every reduction independent of the band count.
"""

import os
import warnings

import numba
import numpy as np
from numba import njit, prange

# The TBB layer warns on older system TBB builds; prefer OpenMP / workqueue.
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
warnings.filterwarnings("ignore", message=".*TBB.*", category=numba.NumbaWarning)

# Walker outcome codes shared with the engine.
WALK_STUCK = 0
WALK_TMAX = 1

_DX = np.array([1, -1, 0, 0], dtype=np.int64)
_DY = np.array([0, 0, 1, -1], dtype=np.int64)


def set_workers(workers):
    """Bound the numba thread pool by the requested worker count."""
    n = max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@njit(inline="always", cache=True)
def _lanesum(row, w):
    s0 = s1 = s2 = s3 = s4 = s5 = s6 = s7 = 0.0
    x = 0
    while x + 8 <= w:
        s0 += row[x]
        s1 += row[x + 1]
        s2 += row[x + 2]
        s3 += row[x + 3]
        s4 += row[x + 4]
        s5 += row[x + 5]
        s6 += row[x + 6]
        s7 += row[x + 7]
        x += 8
    while x < w:
        s0 += row[x]
        x += 1
    return ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7))


@njit(cache=True)
def tree_sum(values):
    """Pairwise sum in a fixed tree shape (adjacent pairs, level by level)."""
    n = values.shape[0]
    if n == 0:
        return 0.0
    buf = values.copy()
    while n > 1:
        half = n // 2
        for i in range(half):
            buf[i] = buf[2 * i] + buf[2 * i + 1]
        if n % 2 == 1:
            buf[half] = buf[n - 1]
            n = half + 1
        else:
            n = half
    return buf[0]


@njit(inline="always", cache=True)
def _band(b, nbands, h):
    return (b * h) // nbands, ((b + 1) * h) // nbands


@njit(parallel=True, cache=True)
def row_sums_real(values, rowsum, nbands):
    h, w = values.shape
    for b in prange(nbands):
        r0, r1 = _band(b, nbands, h)
        for y in range(r0, r1):
            rowsum[y] = _lanesum(values[y], w)


@njit(parallel=True, cache=True)
def row_sums_abs2(values, rowsum, nbands):
    h, w = values.shape
    for b in prange(nbands):
        r0, r1 = _band(b, nbands, h)
        tmp = np.empty(w)
        for y in range(r0, r1):
            row = values[y]
            for x in range(w):
                v = row[x]
                tmp[x] = v.real * v.real + v.imag * v.imag
            rowsum[y] = _lanesum(tmp, w)


@njit(cache=True)
def total_real(values, nbands):
    rowsum = np.empty(values.shape[0])
    row_sums_real(values, rowsum, nbands)
    return tree_sum(rowsum)


@njit(cache=True)
def total_abs2(values, nbands):
    rowsum = np.empty(values.shape[0])
    row_sums_abs2(values, rowsum, nbands)
    return tree_sum(rowsum)


@njit(parallel=True, cache=True)
def scale_inplace(values, factor, nbands):
    h, w = values.shape
    for b in prange(nbands):
        r0, r1 = _band(b, nbands, h)
        for y in range(r0, r1):
            row = values[y]
            for x in range(w):
                row[x] = row[x] * factor


@njit(parallel=True, cache=True)
def diffusion_sweep(src, dst, occ, a, b, inv_h2, rowsum, rowabs, nbands):
    """dst = a*src + b*lap(src); occupied cells are zeroed after the update.

    ``rowsum`` receives the surviving mass per row, ``rowabs`` the mass that
    was removed at occupied cells.
    """
    h, w = src.shape
    c = b * inv_h2
    for band in prange(nbands):
        r0, r1 = _band(band, nbands, h)
        for y in range(r0, r1):
            yp = y + 1 if y + 1 < h else 0
            ym = y - 1 if y > 0 else h - 1
            r = src[y]
            ru = src[yp]
            rd = src[ym]
            o = dst[y]
            k = occ[y]
            o[0] = a * r[0] + c * (((r[1] + r[w - 1]) + (ru[0] + rd[0])) - 4.0 * r[0])
            for x in range(1, w - 1):
                o[x] = a * r[x] + c * (((r[x + 1] + r[x - 1]) + (ru[x] + rd[x])) - 4.0 * r[x])
            o[w - 1] = a * r[w - 1] + c * (
                ((r[0] + r[w - 2]) + (ru[w - 1] + rd[w - 1])) - 4.0 * r[w - 1]
            )
            lost = 0.0
            for x in range(w):
                if k[x]:
                    lost += o[x]
                    o[x] = 0.0
            rowabs[y] = lost
            rowsum[y] = _lanesum(o, w)


@njit(parallel=True, cache=True)
def leapfrog_sweep(prev, cur, dst, occ, a, b, inv_h2, rowsum, rowabs, nbands):
    """dst = a*prev + i*b*lap(cur); occupied cells are zeroed after the update.

    Row sums are of |dst|^2; ``rowabs`` collects |.|^2 removed at occupied cells.
    """
    h, w = cur.shape
    ib = 1j * (b * inv_h2)
    for band in prange(nbands):
        r0, r1 = _band(band, nbands, h)
        tmp = np.empty(w)
        for y in range(r0, r1):
            yp = y + 1 if y + 1 < h else 0
            ym = y - 1 if y > 0 else h - 1
            r = cur[y]
            ru = cur[yp]
            rd = cur[ym]
            p = prev[y]
            o = dst[y]
            k = occ[y]
            o[0] = a * p[0] + ib * (((r[1] + r[w - 1]) + (ru[0] + rd[0])) - 4.0 * r[0])
            for x in range(1, w - 1):
                o[x] = a * p[x] + ib * (((r[x + 1] + r[x - 1]) + (ru[x] + rd[x])) - 4.0 * r[x])
            o[w - 1] = a * p[w - 1] + ib * (
                ((r[0] + r[w - 2]) + (ru[w - 1] + rd[w - 1])) - 4.0 * r[w - 1]
            )
            lost = 0.0
            for x in range(w):
                v = o[x]
                p2 = v.real * v.real + v.imag * v.imag
                if k[x]:
                    lost += p2
                    o[x] = 0.0
                    p2 = 0.0
                tmp[x] = p2
            rowabs[y] = lost
            rowsum[y] = _lanesum(tmp, w)


@njit(cache=True)
def advance_classical(bufs, cur, occ, factor, coef, inv_h2, nsteps, eps, nbands):
    """Run ``nsteps`` absorbing diffusion steps with per-step renormalisation.

    ``bufs`` holds two ping-pong buffers and ``cur`` indexes the live one; the
    live field equals ``factor * bufs[cur]``.  Returns the new live index, its
    factor, the number of completed steps and the largest per-step deviation
    of the pre-absorption mass from one.  A returned factor of zero means the
    field was absorbed completely on the last completed step.
    """
    h = bufs.shape[1]
    rowsum = np.empty(h)
    rowabs = np.empty(h)
    drift = 0.0
    for step in range(nsteps):
        nxt = 1 - cur
        diffusion_sweep(bufs[cur], bufs[nxt], occ, factor, factor * coef, inv_h2,
                        rowsum, rowabs, nbands)
        total = tree_sum(rowsum)
        lost = tree_sum(rowabs)
        d = abs(total + lost - 1.0)
        if d > drift:
            drift = d
        cur = nxt
        if not total > eps:
            return cur, 0.0, step + 1, drift
        factor = 1.0 / total
    return cur, factor, nsteps, drift


@njit(cache=True)
def advance_quantum(bufs, order, occ, f_old, f_new, alpha, inv_h2, nsteps, eps, nbands):
    """Run ``nsteps`` absorbing leapfrog steps with per-step renormalisation.

    ``bufs`` holds three buffers; ``order`` = (older, newer, spare) indices.
    Live levels are ``f_old * bufs[older]`` and ``f_new * bufs[newer]``.  Both
    levels are rescaled by the same factor so the pair stays a solution of the
    linear scheme.  ``order`` is updated in place.
    """
    h = bufs.shape[1]
    rowsum = np.empty(h)
    rowabs = np.empty(h)
    drift = 0.0
    for step in range(nsteps):
        old = order[0]
        new = order[1]
        spare = order[2]
        leapfrog_sweep(bufs[old], bufs[new], bufs[spare], occ, f_old, f_new * alpha,
                       inv_h2, rowsum, rowabs, nbands)
        total = tree_sum(rowsum)
        lost = tree_sum(rowabs)
        d = abs(total + lost - 1.0)
        if d > drift:
            drift = d
        order[0] = new
        order[1] = spare
        order[2] = old
        if not total > eps:
            return 0.0, 0.0, step + 1, drift
        g = 1.0 / np.sqrt(total)
        f_old = f_new * g
        f_new = g
    return f_old, f_new, nsteps, drift


@njit(cache=True)
def free_norm_trace(bufs, order, alpha, inv_h2, nsteps, every, offset, nbands):
    """Unrenormalised leapfrog evolution; returns |psi|^2 totals whenever
    ``step + offset`` is a multiple of ``every``."""
    h, w = bufs.shape[1], bufs.shape[2]
    occ = np.zeros((h, w), dtype=np.uint8)
    rowsum = np.empty(h)
    rowabs = np.empty(h)
    out = np.empty((nsteps + offset) // every - offset // every)
    j = 0
    for step in range(1, nsteps + 1):
        old = order[0]
        new = order[1]
        spare = order[2]
        leapfrog_sweep(bufs[old], bufs[new], bufs[spare], occ, 1.0, alpha, inv_h2,
                       rowsum, rowabs, nbands)
        order[0] = new
        order[1] = spare
        order[2] = old
        if (step + offset) % every == 0:
            out[j] = tree_sum(rowsum)
            j += 1
    return out


@njit(inline="always", cache=True)
def _on_frontier(occ, x, y, w, h):
    if occ[y, x]:
        return False
    xp = x + 1 if x + 1 < w else 0
    xm = x - 1 if x > 0 else w - 1
    yp = y + 1 if y + 1 < h else 0
    ym = y - 1 if y > 0 else h - 1
    return occ[y, xp] or occ[y, xm] or occ[yp, x] or occ[ym, x]


@njit(cache=True)
def walk(occ, x, y, rng, max_steps):
    """Torus random walk until the walker sits on a frontier cell.

    Returns (code, x, y, steps).  The starting cell is tested before the first
    move, so a walker released next to the cluster sticks where it is.
    """
    h, w = occ.shape
    steps = 0
    while True:
        if _on_frontier(occ, x, y, w, h):
            return WALK_STUCK, x, y, steps
        if steps >= max_steps:
            return WALK_TMAX, x, y, steps
        d = rng.integers(0, 4)
        x = (x + _DX[d]) % w
        y = (y + _DY[d]) % h
        steps += 1


@njit(cache=True)
def walk_adaptive(occ, x, y, cx, cy, r_launch, r_kill, rng, max_steps):
    """Walk from (x, y) with a kill ring of radius ``r_kill`` around (cx, cy).

    A walker crossing the ring is relaunched at a fresh random angle on the
    ``r_launch`` circle.  Returns (code, x, y, steps, relaunches).
    """
    h, w = occ.shape
    steps = 0
    relaunches = 0
    kill2 = r_kill * r_kill
    while True:
        if _on_frontier(occ, x, y, w, h):
            return WALK_STUCK, x, y, steps, relaunches
        if steps >= max_steps:
            return WALK_TMAX, x, y, steps, relaunches
        d = rng.integers(0, 4)
        x = (x + _DX[d]) % w
        y = (y + _DY[d]) % h
        steps += 1
        ddx = x - cx
        ddy = y - cy
        if ddx * ddx + ddy * ddy > kill2:
            theta = 2.0 * np.pi * rng.random()
            x = (cx + int(np.rint(r_launch * np.cos(theta)))) % w
            y = (cy + int(np.rint(r_launch * np.sin(theta)))) % h
            relaunches += 1
