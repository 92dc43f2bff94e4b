"""Compiled inner loops: B-spline basis evaluation, tensor-spline contraction,
triangular-shaped-cloud deposition and gather.

All loops are sequential so results do not depend on the thread count.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def find_span(knots, degree, nbasis, x):
    """Index of the knot interval containing x (clamped to valid spans)."""
    if x >= knots[nbasis]:
        return nbasis - 1
    if x <= knots[degree]:
        return degree
    lo = degree
    hi = nbasis
    mid = (lo + hi) // 2
    while x < knots[mid] or x >= knots[mid + 1]:
        if x < knots[mid]:
            hi = mid
        else:
            lo = mid
        mid = (lo + hi) // 2
    return mid


@njit(cache=True)
def basis_derivs(knots, degree, span, x, nder, out, ndu, left, right, a):
    """Nonzero basis functions and their derivatives at x.

    Writes ``out[d, j]`` = d-th derivative of basis ``span - degree + j``,
    following the classical triangular scheme of de Boor.  ``ndu``, ``left``,
    ``right`` and ``a`` are caller-owned work arrays.
    """
    p = degree
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    for j in range(p + 1):
        out[0, j] = ndu[j, p]
    for r in range(p + 1):
        s1 = 0
        s2 = 1
        a[0, 0] = 1.0
        for k in range(1, nder + 1):
            d = 0.0
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            out[k, r] = d
            s1, s2 = s2, s1
    fac = float(p)
    for k in range(1, nder + 1):
        for j in range(p + 1):
            out[k, j] *= fac
        fac *= p - k


@njit(cache=True)
def spline_eval(coefs, knots, degree, pts, which, orders, out):
    """Evaluate derivatives of several 3D tensor-product splines at points.

    ``coefs`` has shape (F, nb, nb, nb) with all splines sharing ``knots``.
    Row q of the output is derivative ``orders[q]`` of spline ``which[q]``;
    ``out`` has shape (m, npts).  Derivatives above the degree are zero.
    Basis functions are computed once per point and the contraction over the
    third axis is shared by rows with equal spline and third index.
    """
    nf = coefs.shape[0]
    nb = coefs.shape[1]
    p = degree
    m = orders.shape[0]
    nder = 0
    for q in range(m):
        for ax in range(3):
            if orders[q, ax] > nder:
                nder = orders[q, ax]
    if nder > p:
        nder = p
    need_c = np.zeros((nf, nder + 1), dtype=np.bool_)
    need_bc = np.zeros((nf, nder + 1, nder + 1), dtype=np.bool_)
    for q in range(m):
        if orders[q, 0] <= p and orders[q, 1] <= p and orders[q, 2] <= p:
            need_c[which[q], orders[q, 2]] = True
            need_bc[which[q], orders[q, 1], orders[q, 2]] = True
    bx = np.zeros((nder + 1, p + 1))
    by = np.zeros((nder + 1, p + 1))
    bz = np.zeros((nder + 1, p + 1))
    tz = np.empty((nf, nder + 1, p + 1, p + 1))
    tyz = np.empty((nf, nder + 1, nder + 1, p + 1))
    ndu = np.empty((p + 1, p + 1))
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    wa = np.empty((2, p + 1))
    for i in range(pts.shape[0]):
        sx = find_span(knots, p, nb, pts[i, 0])
        sy = find_span(knots, p, nb, pts[i, 1])
        sz = find_span(knots, p, nb, pts[i, 2])
        basis_derivs(knots, p, sx, pts[i, 0], nder, bx, ndu, left, right, wa)
        basis_derivs(knots, p, sy, pts[i, 1], nder, by, ndu, left, right, wa)
        basis_derivs(knots, p, sz, pts[i, 2], nder, bz, ndu, left, right, wa)
        ox = sx - p
        oy = sy - p
        oz = sz - p
        for f in range(nf):
            for c in range(nder + 1):
                if not need_c[f, c]:
                    continue
                for u in range(p + 1):
                    for v in range(p + 1):
                        acc = 0.0
                        for w in range(p + 1):
                            acc += coefs[f, ox + u, oy + v, oz + w] * bz[c, w]
                        tz[f, c, u, v] = acc
            for b in range(nder + 1):
                for c in range(nder + 1):
                    if not need_bc[f, b, c]:
                        continue
                    for u in range(p + 1):
                        acc = 0.0
                        for v in range(p + 1):
                            acc += tz[f, c, u, v] * by[b, v]
                        tyz[f, b, c, u] = acc
        for q in range(m):
            a = orders[q, 0]
            b = orders[q, 1]
            c = orders[q, 2]
            if a > p or b > p or c > p:
                out[q, i] = 0.0
                continue
            f = which[q]
            acc = 0.0
            for u in range(p + 1):
                acc += tyz[f, b, c, u] * bx[a, u]
            out[q, i] = acc


@njit(cache=True)
def _tsc_weights(s, w):
    # s is the position in cell units relative to the nearest node, |s| <= 1/2
    w[0] = 0.5 * (0.5 - s) ** 2
    w[1] = 0.75 - s * s
    w[2] = 0.5 * (0.5 + s) ** 2


@njit(cache=True)
def tsc_deposit(pos, weights, origin, spacing, n, out):
    """Accumulate weights onto an n^3 grid with the TSC kernel (node units)."""
    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    for i in range(pos.shape[0]):
        gx = (pos[i, 0] - origin[0]) / spacing
        gy = (pos[i, 1] - origin[1]) / spacing
        gz = (pos[i, 2] - origin[2]) / spacing
        ix = int(np.floor(gx + 0.5))
        iy = int(np.floor(gy + 0.5))
        iz = int(np.floor(gz + 0.5))
        _tsc_weights(gx - ix, wx)
        _tsc_weights(gy - iy, wy)
        _tsc_weights(gz - iz, wz)
        q = weights[i]
        for a in range(3):
            jx = ix - 1 + a
            if jx < 0 or jx >= n:
                continue
            for b in range(3):
                jy = iy - 1 + b
                if jy < 0 or jy >= n:
                    continue
                qab = q * wx[a] * wy[b]
                for c in range(3):
                    jz = iz - 1 + c
                    if jz < 0 or jz >= n:
                        continue
                    out[jx, jy, jz] += qab * wz[c]


@njit(cache=True)
def tsc_gather(pos, field, origin, spacing, n, out):
    """Interpolate a (3, n, n, n) vector field to particle positions with TSC."""
    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    ncomp = field.shape[0]
    for i in range(pos.shape[0]):
        gx = (pos[i, 0] - origin[0]) / spacing
        gy = (pos[i, 1] - origin[1]) / spacing
        gz = (pos[i, 2] - origin[2]) / spacing
        ix = int(np.floor(gx + 0.5))
        iy = int(np.floor(gy + 0.5))
        iz = int(np.floor(gz + 0.5))
        _tsc_weights(gx - ix, wx)
        _tsc_weights(gy - iy, wy)
        _tsc_weights(gz - iz, wz)
        for comp in range(ncomp):
            out[comp, i] = 0.0
        for a in range(3):
            jx = ix - 1 + a
            if jx < 0 or jx >= n:
                continue
            for b in range(3):
                jy = iy - 1 + b
                if jy < 0 or jy >= n:
                    continue
                wab = wx[a] * wy[b]
                for c in range(3):
                    jz = iz - 1 + c
                    if jz < 0 or jz >= n:
                        continue
                    wt = wab * wz[c]
                    for comp in range(ncomp):
                        out[comp, i] += wt * field[comp, jx, jy, jz]


@njit(cache=True)
def _lagrange4_weights(s, w):
    # nodes at -1, 0, 1, 2 relative to the base node, 0 <= s < 1
    w[0] = -s * (s - 1.0) * (s - 2.0) / 6.0
    w[1] = (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0
    w[2] = -(s + 1.0) * s * (s - 2.0) / 2.0
    w[3] = (s + 1.0) * s * (s - 1.0) / 6.0


@njit(cache=True)
def cubic_gather(pos, field, origin, spacing, n, out, inside):
    """Tricubic Lagrange interpolation of an (n, n, n, ncomp) field.

    Points outside the node box get zeros and ``inside[i] = False``; near the
    faces the 4-point stencil is shifted inward.  ``out`` is (ncomp, npts).
    """
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    ncomp = field.shape[3]
    acc = np.empty(ncomp)
    hi = (n - 1) * spacing
    for i in range(pos.shape[0]):
        rx = pos[i, 0] - origin[0]
        ry = pos[i, 1] - origin[1]
        rz = pos[i, 2] - origin[2]
        if rx < 0.0 or ry < 0.0 or rz < 0.0 or rx > hi or ry > hi or rz > hi:
            inside[i] = False
            for comp in range(ncomp):
                out[comp, i] = 0.0
            continue
        inside[i] = True
        gx = rx / spacing
        gy = ry / spacing
        gz = rz / spacing
        ix = min(max(int(np.floor(gx)), 1), n - 3)
        iy = min(max(int(np.floor(gy)), 1), n - 3)
        iz = min(max(int(np.floor(gz)), 1), n - 3)
        _lagrange4_weights(gx - ix, wx)
        _lagrange4_weights(gy - iy, wy)
        _lagrange4_weights(gz - iz, wz)
        for comp in range(ncomp):
            acc[comp] = 0.0
        for a in range(4):
            jx = ix - 1 + a
            for b in range(4):
                jy = iy - 1 + b
                wab = wx[a] * wy[b]
                for c in range(4):
                    wt = wab * wz[c]
                    jz = iz - 1 + c
                    for comp in range(ncomp):
                        acc[comp] += wt * field[jx, jy, jz, comp]
        for comp in range(ncomp):
            out[comp, i] = acc[comp]


@njit(cache=True)
def kdk_drift(x, p, dt):
    for i in range(x.shape[0]):
        for a in range(3):
            x[i, a] += dt * p[i, a]


@njit(cache=True)
def kdk_kick(p, E, h):
    for i in range(p.shape[0]):
        for a in range(3):
            p[i, a] += h * E[a, i]
