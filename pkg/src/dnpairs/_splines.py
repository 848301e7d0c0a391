"""Compiled B-spline kernels for the spline-projected divergence primitive.

Knot vectors and coefficient arrays follow ``scipy.interpolate.BSpline``
conventions (clamped knots, coefficients indexed from the first basis
function). Basis derivatives use the classical triangular-table algorithm.
All per-point routines write into caller-owned work buffers so the hot
loops do not allocate.
"""
import numpy as np
from numba import njit

KMAX = 8  # work buffer size, enough for degree <= 7


@njit(cache=True)
def find_span(t, k, x):
    n = t.shape[0] - k - 1
    if x >= t[n]:
        return n - 1
    if x <= t[k]:
        return k
    lo, hi = k, n
    mid = (lo + hi) // 2
    while x < t[mid] or x >= t[mid + 1]:
        if x < t[mid]:
            hi = mid
        else:
            lo = mid
        mid = (lo + hi) // 2
    return mid


@njit(cache=True)
def basis_ders(t, k, span, x, nd, ders, ndu, left, right, a):
    """Fill ``ders[0..nd, 0..k]`` with derivatives of the nonzero basis functions."""
    ndu[0, 0] = 1.0
    for j in range(1, k + 1):
        left[j] = x - t[span + 1 - j]
        right[j] = t[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    for j in range(k + 1):
        ders[0, j] = ndu[j, k]
    for r in range(k + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for q in range(1, nd + 1):
            d = 0.0
            rk = r - q
            pk = k - q
            if r >= q:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = q - 1 if r - 1 <= pk else k - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, q] = -a[s1, q - 1] / ndu[pk + 1, r]
                d += a[s2, q] * ndu[r, pk]
            ders[q, r] = d
            s1, s2 = s2, s1
    fac = float(k)
    for q in range(1, nd + 1):
        for j in range(k + 1):
            ders[q, j] *= fac
        fac *= k - q


@njit(cache=True)
def _work():
    return (np.empty((KMAX, KMAX)), np.empty(KMAX), np.empty(KMAX), np.empty((2, KMAX)),
            np.empty((3, KMAX)), np.empty((3, KMAX)), np.empty((3, KMAX)))


@njit(cache=True)
def pt1(t, k, c, x, ndu, left, right, a, D):
    s = find_span(t, k, x)
    basis_ders(t, k, s, x, 1, D, ndu, left, right, a)
    v0 = 0.0
    v1 = 0.0
    for j in range(k + 1):
        cj = c[s - k + j]
        v0 += D[0, j] * cj
        v1 += D[1, j] * cj
    return v0, v1


@njit(cache=True)
def pt2(ta, ka, tb, kb, c, xa, xb, ndu, left, right, a, Da, Db):
    sa = find_span(ta, ka, xa)
    sb = find_span(tb, kb, xb)
    basis_ders(ta, ka, sa, xa, 1, Da, ndu, left, right, a)
    basis_ders(tb, kb, sb, xb, 1, Db, ndu, left, right, a)
    v = 0.0
    va = 0.0
    vb = 0.0
    for i in range(ka + 1):
        r0 = 0.0
        r1 = 0.0
        for j in range(kb + 1):
            cij = c[sa - ka + i, sb - kb + j]
            r0 += Db[0, j] * cij
            r1 += Db[1, j] * cij
        v += Da[0, i] * r0
        va += Da[1, i] * r0
        vb += Da[0, i] * r1
    return v, va, vb


@njit(cache=True)
def pt3(t1, k1, t2, k2, t3, k3, c, x1, x2, x3, ndu, left, right, a, D1, D2, D3):
    """Derivatives (0, d1, d2, d3, d11, d12, d13) of a 3D tensor spline."""
    s1 = find_span(t1, k1, x1)
    s2 = find_span(t2, k2, x2)
    s3 = find_span(t3, k3, x3)
    basis_ders(t1, k1, s1, x1, 2, D1, ndu, left, right, a)
    basis_ders(t2, k2, s2, x2, 1, D2, ndu, left, right, a)
    basis_ders(t3, k3, s3, x3, 1, D3, ndu, left, right, a)
    v0 = v1 = v2 = v3 = v11 = v12 = v13 = 0.0
    for i in range(k1 + 1):
        # contract axes 2 and 3 first: (00, 10, 01) in (x2, x3)
        m00 = 0.0
        m10 = 0.0
        m01 = 0.0
        for j in range(k2 + 1):
            r0 = 0.0
            r1 = 0.0
            for l in range(k3 + 1):
                cij = c[s1 - k1 + i, s2 - k2 + j, s3 - k3 + l]
                r0 += D3[0, l] * cij
                r1 += D3[1, l] * cij
            m00 += D2[0, j] * r0
            m10 += D2[1, j] * r0
            m01 += D2[0, j] * r1
        v0 += D1[0, i] * m00
        v1 += D1[1, i] * m00
        v2 += D1[0, i] * m10
        v3 += D1[0, i] * m01
        v11 += D1[2, i] * m00
        v12 += D1[1, i] * m10
        v13 += D1[1, i] * m01
    return v0, v1, v2, v3, v11, v12, v13


@njit(cache=True)
def eval1(t, k, c, x, out):
    """Value and first derivative of a 1D spline at points ``x``."""
    ndu, left, right, a, D, _, _ = _work()
    for p in range(x.shape[0]):
        out[p, 0], out[p, 1] = pt1(t, k, c, x[p], ndu, left, right, a, D)


@njit(cache=True)
def eval2(ta, ka, tb, kb, c, xa, xb, out):
    """Value, d/da and d/db of a 2D tensor spline."""
    ndu, left, right, a, Da, Db, _ = _work()
    for p in range(xa.shape[0]):
        out[p, 0], out[p, 1], out[p, 2] = pt2(ta, ka, tb, kb, c, xa[p], xb[p],
                                              ndu, left, right, a, Da, Db)


@njit(cache=True)
def eval3(t1, k1, t2, k2, t3, k3, c, x, out):
    """Columns (0, d1, d2, d3, d11, d12, d13) of a 3D tensor spline."""
    ndu, left, right, a, D1, D2, D3 = _work()
    for p in range(x.shape[0]):
        r = pt3(t1, k1, t2, k2, t3, k3, c, x[p, 0], x[p, 1], x[p, 2],
                ndu, left, right, a, D1, D2, D3)
        for q in range(7):
            out[p, q] = r[q]


@njit(cache=True)
def bump1(x, a, b, p, scale):
    """Value and derivative of ``scale * exp(-[s(1-s)]^-p)`` on (a, b)."""
    L = b - a
    s = (x - a) / L
    g = s * (1.0 - s)
    if g <= 0.0:
        return 0.0, 0.0
    F = g ** (-p)
    if F >= 700.0:
        return 0.0, 0.0
    v = scale * np.exp(-F)
    # d/dt exp(-g^-p) = exp(-F) p g^(-p-1) g'
    return v, v * p * F / g * (1.0 - 2.0 * s) / L


@njit(cache=True)
def primitive_field(x, lo, hi,
                    t1, c1, k1, t2, t3, k,
                    cH, tS2, cS, cH2, tL2, cSH2, m,
                    th_a, th_b, th_p, th_s,
                    tT1, cT1, tT2, cT2, tT3, cT3, kT,
                    X, DX, h, gh):
    """Evaluate the spline divergence primitive and its exact divergence.

    ``S1`` (knots t1, t2, t3) is the x1 antiderivative of the interpolant,
    ``H`` (t2, t3) its full x1 integral, ``SH`` (tS2, t3) the x2
    antiderivative of H, ``H2`` (t3) its full x2 integral and ``SH2`` (tL2)
    the x3 antiderivative of H2, with total mass ``m``.
    """
    ndu, left, right, a, D1, D2, D3 = _work()
    for p in range(x.shape[0]):
        x1, x2, x3 = x[p, 0], x[p, 1], x[p, 2]
        if (x1 <= lo[0] or x1 >= hi[0] or x2 <= lo[1] or x2 >= hi[1]
                or x3 <= lo[2] or x3 >= hi[2]):
            for j in range(3):
                X[p, j] = 0.0
                gh[p, j] = 0.0
                for l in range(3):
                    DX[p, j, l] = 0.0
            h[p] = 0.0
            continue
        S, S1d, S2d, S3d, S11, S12, S13 = pt3(t1, k1, t2, k, t3, k, c1, x1, x2, x3,
                                              ndu, left, right, a, D1, D2, D3)
        H, H_2, H_3 = pt2(t2, k, t3, k, cH, x2, x3, ndu, left, right, a, D1, D2)
        SH, _, SH_3 = pt2(tS2, k + 1, t3, k, cS, x2, x3, ndu, left, right, a, D1, D2)
        H2, H2_3 = pt1(t3, k, cH2, x3, ndu, left, right, a, D1)
        SH2, _ = pt1(tL2, k + 1, cSH2, x3, ndu, left, right, a, D1)
        b1, b1d = bump1(x1, th_a[0], th_b[0], th_p, th_s[0])
        b2, b2d = bump1(x2, th_a[1], th_b[1], th_p, th_s[1])
        b3, b3d = bump1(x3, th_a[2], th_b[2], th_p, th_s[2])
        T1, _ = pt1(tT1, kT, cT1, x1, ndu, left, right, a, D1)
        T2, _ = pt1(tT2, kT, cT2, x2, ndu, left, right, a, D1)
        T3, _ = pt1(tT3, kT, cT3, x3, ndu, left, right, a, D1)
        # X1 = S1 - Theta1 H
        X[p, 0] = S - T1 * H
        DX[p, 0, 0] = S1d - b1 * H
        DX[p, 0, 1] = S2d - T1 * H_2
        DX[p, 0, 2] = S3d - T1 * H_3
        # X2 = theta1 (SH - Theta2 H2)
        B2 = SH - T2 * H2
        X[p, 1] = b1 * B2
        DX[p, 1, 0] = b1d * B2
        DX[p, 1, 1] = b1 * (H - b2 * H2)
        DX[p, 1, 2] = b1 * (SH_3 - T2 * H2_3)
        # X3 = theta1 theta2 (SH2 - m Theta3)
        B3 = SH2 - m * T3
        X[p, 2] = b1 * b2 * B3
        DX[p, 2, 0] = b1d * b2 * B3
        DX[p, 2, 1] = b1 * b2d * B3
        DX[p, 2, 2] = b1 * b2 * (H2 - m * b3)
        h[p] = S1d - m * b1 * b2 * b3
        gh[p, 0] = S11 - m * b1d * b2 * b3
        gh[p, 1] = S12 - m * b1 * b2d * b3
        gh[p, 2] = S13 - m * b1 * b2 * b3d
