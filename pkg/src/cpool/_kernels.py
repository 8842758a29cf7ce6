"""Compiled inner loops for window maxima.

Plain loops over (batch, channel) planes; single-threaded so results are
bit-reproducible.  Indices returned by ``dilate_argmax`` are flat offsets
into the whole C-contiguous input, so the adjoint is a single scatter.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _hpass(x, radius, hval, hcol):
    b, c, h, w = x.shape
    k = 2 * radius + 1
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    bc = max(j - radius, 0)
                    best = x[bi, ci, i, bc]
                    for d in range(1, k):
                        jj = min(max(j + d - radius, 0), w - 1)
                        v = x[bi, ci, i, jj]
                        if v > best:
                            best = v
                            bc = jj
                    hval[bi, ci, i, j] = best
                    hcol[bi, ci, i, j] = bc


@njit(cache=True, nogil=True)
def _hpass1(x, hval, hcol):
    # radius 1 with a compile-time trip count
    b, c, h, w = x.shape
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    bc = max(j - 1, 0)
                    best = x[bi, ci, i, bc]
                    for d in range(1, 3):
                        jj = min(j + d - 1, w - 1)
                        v = x[bi, ci, i, jj]
                        if v > best:
                            best = v
                            bc = jj
                    hval[bi, ci, i, j] = best
                    hcol[bi, ci, i, j] = bc


@njit(cache=True, nogil=True)
def _vpass(hval, hcol, radius, out, idx):
    b, c, h, w = hval.shape
    k = 2 * radius + 1
    for bi in range(b):
        for ci in range(c):
            base = (bi * c + ci) * h * w
            for i in range(h):
                for j in range(w):
                    br = max(i - radius, 0)
                    best = hval[bi, ci, br, j]
                    bk = br * w + hcol[bi, ci, br, j]
                    for d in range(1, k):
                        ii = min(max(i + d - radius, 0), h - 1)
                        v = hval[bi, ci, ii, j]
                        # load unconditionally; a dependent load after the branch is far slower
                        kk = ii * w + hcol[bi, ci, ii, j]
                        if v > best:
                            best = v
                            bk = kk
                    out[bi, ci, i, j] = best
                    idx[bi, ci, i, j] = base + bk


@njit(cache=True, nogil=True)
def dilate_argmax(x, radius):
    """Separable replicate-border window max with row-major-first argmax.

    Columns are scanned first inside each row, then rows, each keeping the
    first strict maximum.  Returns the maxima and the flat source offsets.
    """
    hval = np.empty_like(x)
    hcol = np.empty(x.shape, dtype=np.int32)
    out = np.empty_like(x)
    idx = np.empty(x.shape, dtype=np.int64)
    if radius == 1:
        _hpass1(x, hval, hcol)
    else:
        _hpass(x, radius, hval, hcol)
    _vpass(hval, hcol, radius, out, idx)
    return out, idx


@njit(cache=True, nogil=True)
def dilate(x, radius):
    """Window maxima only; same values as ``dilate_argmax``."""
    b, c, h, w = x.shape
    k = 2 * radius + 1
    hval = np.empty_like(x)
    out = np.empty_like(x)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    best = x[bi, ci, i, max(j - radius, 0)]
                    for d in range(1, k):
                        best = max(best, x[bi, ci, i, min(max(j + d - radius, 0), w - 1)])
                    hval[bi, ci, i, j] = best
            for i in range(h):
                for j in range(w):
                    best = hval[bi, ci, max(i - radius, 0), j]
                    for d in range(1, k):
                        best = max(best, hval[bi, ci, min(max(i + d - radius, 0), h - 1), j])
                    out[bi, ci, i, j] = best
    return out


@njit(cache=True, nogil=True)
def scatter_flat(g, idx):
    """Adjoint of a gather by flat offsets: ``gx.flat[idx[p]] += g.flat[p]``."""
    gf = g.ravel()
    fi = idx.ravel()
    out = np.zeros(gf.size, dtype=g.dtype)
    for p in range(gf.size):
        out[fi[p]] += gf[p]
    return out.reshape(g.shape)


@njit(cache=True, nogil=True)
def neighbor_excess(x):
    """``sum_k max(x_k - x, 0)`` over the up to 8 neighbours inside the image.

    Positions outside the image are skipped rather than replicated, so a
    border pixel never counts the same neighbour twice.  Neighbours are
    accumulated in row-major offset order starting from zero.
    """
    b, c, h, w = x.shape
    out = np.empty_like(x)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    ctr = x[bi, ci, i, j]
                    acc = ctr - ctr
                    for dy in range(-1, 2):
                        ii = i + dy
                        if ii < 0 or ii >= h:
                            continue
                        for dx in range(-1, 2):
                            jj = j + dx
                            if (dy == 0 and dx == 0) or jj < 0 or jj >= w:
                                continue
                            d = x[bi, ci, ii, jj] - ctr
                            if d > 0:
                                acc += d
                    out[bi, ci, i, j] = acc
    return out


@njit(cache=True, nogil=True)
def neighbor_excess_adjoint(x, g):
    """Input gradient of ``neighbor_excess``; a zero difference passes no gradient."""
    b, c, h, w = x.shape
    gx = np.zeros_like(g)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    ctr = x[bi, ci, i, j]
                    gv = g[bi, ci, i, j]
                    for dy in range(-1, 2):
                        ii = i + dy
                        if ii < 0 or ii >= h:
                            continue
                        for dx in range(-1, 2):
                            jj = j + dx
                            if (dy == 0 and dx == 0) or jj < 0 or jj >= w:
                                continue
                            if x[bi, ci, ii, jj] - ctr > 0:
                                gx[bi, ci, ii, jj] += gv
                                gx[bi, ci, i, j] -= gv
    return gx
