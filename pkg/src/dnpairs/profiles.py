"""Univariate profiles and separable scalar fields with exact derivatives.

A :class:`SeparableField` is a finite sum of tensor products of 1D profiles.
Every mixed partial of such a field is available in closed form, which the
Gevrey seminorms and the separable divergence primitive rely on.
"""
from __future__ import annotations

from math import comb

import numpy as np

from .errors import NonQuasianalyticError
from .quadrature import composite_rule, gauss_legendre
from .tensorfield import Box, ScalarField, _as_points


class Profile1D:
    """Smooth function of one variable.

    Subclasses implement ``derivs(t, k)`` returning an array of shape
    ``(k + 1, len(t))`` with the derivatives of order ``0..k``.
    """

    support = None  # (a, b) or None
    breaks = ()

    def derivs(self, t, k):
        raise NotImplementedError

    def __call__(self, t):
        return self.derivs(np.asarray(t, dtype=float), 0)[0]

    def primitive(self, t, a, nodes=64):
        """``int_a^t`` evaluated per point with a Gauss rule on each segment.

        Segments are split at the profile breaks so that flat bump tails do
        not spoil convergence.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        xs, ws = gauss_legendre(nodes)
        out = np.zeros_like(t)
        edges = sorted(set([a] + [b for b in self.breaks]))
        # integrate over [a, t] as a sum over break-delimited pieces
        for lo, hi in zip(edges[:-1], edges[1:]):
            if hi <= a:
                continue
            right = np.clip(t, lo, hi)
            L = right - lo
            sel = L > 0
            if not sel.any():
                continue
            x = lo + 0.5 * L[sel, None] * (xs[None, :] + 1.0)
            vals = self(x.ravel()).reshape(x.shape)
            out[sel] += 0.5 * L[sel] * (vals @ ws)
        last = edges[-1]
        sel = t > last
        if sel.any():
            lo = np.full(sel.sum(), max(last, a))
            L = t[sel] - lo
            x = lo[:, None] + 0.5 * L[:, None] * (xs[None, :] + 1.0)
            vals = self(x.ravel()).reshape(x.shape)
            out[sel] += 0.5 * L * (vals @ ws)
        return out

    def integral(self, a=None, b=None, nodes=64):
        if a is None or b is None:
            a, b = self.support
        x, w = composite_rule(a, b, nodes, self.breaks)
        return float(w @ self(x))


class Const1D(Profile1D):
    def __init__(self, value=1.0):
        self.value = float(value)

    def derivs(self, t, k):
        out = np.zeros((k + 1, len(t)))
        out[0] = self.value
        return out

    def integral(self, a=None, b=None, nodes=64):
        return self.value * (b - a)


class Poly1D(Profile1D):
    """Polynomial with coefficients in increasing degree."""

    def __init__(self, coefs):
        self.p = np.polynomial.Polynomial(np.asarray(coefs, dtype=float))

    def derivs(self, t, k):
        out = np.empty((k + 1, len(t)))
        p = self.p
        for j in range(k + 1):
            out[j] = p(t)
            p = p.deriv()
        return out


class Cos1D(Profile1D):
    """``cos(freq * t + phase)``."""

    def __init__(self, freq, phase=0.0):
        self.freq, self.phase = float(freq), float(phase)

    def derivs(self, t, k):
        arg = self.freq * t + self.phase
        c, s = np.cos(arg), np.sin(arg)
        cyc = (c, -s, -c, s)
        return np.stack([self.freq ** j * cyc[j % 4] for j in range(k + 1)])


class Bump1D(Profile1D):
    """Gevrey-type bump ``scale * exp(-[s(1-s)]^(-p))`` on ``(a, b)``.

    Here ``s = (t - a)/(b - a)`` and ``p = 1/(2(sigma - 1))``. Derivatives of
    every order come from a three-term recursion for powers of ``s(1-s)``
    followed by the exponential Leibniz rule.
    """

    def __init__(self, a, b, sigma=2.0, scale=1.0):
        if sigma <= 1:
            raise NonQuasianalyticError(f"bump order sigma={sigma} must exceed 1")
        if not a < b:
            raise ValueError("empty bump interval")
        self.a, self.b = float(a), float(b)
        self.sigma = float(sigma)
        self.p = 1.0 / (2.0 * (self.sigma - 1.0))
        self.scale = float(scale)
        self.support = (self.a, self.b)
        self.breaks = (self.a, self.b)

    def scaled(self, factor):
        return Bump1D(self.a, self.b, self.sigma, self.scale * factor)

    def derivs(self, t, k):
        t = np.asarray(t, dtype=float)
        L = self.b - self.a
        out = np.zeros((k + 1, len(t)))
        s = (t - self.a) / L
        g = s * (1.0 - s)
        live = g > 0
        # exp underflows far before g reaches 0; skip those points entirely
        live[live] = g[live] ** (-self.p) < 700.0
        if not live.any():
            return out
        g = g[live]
        g1 = 1.0 - 2.0 * s[live]
        r = -self.p
        F = [g ** r]
        if k >= 1:
            F.append(r * g1 * F[0] / g)
        for j in range(1, k):
            F.append(((r - j) * g1 * F[j] + (r * j - 0.5 * j * (j - 1)) * (-2.0) * F[j - 1]) / g)
        phi = [-Fj for Fj in F]
        psi = [np.exp(phi[0])]
        for j in range(k):
            psi.append(sum(comb(j, i) * phi[i + 1] * psi[j - i] for i in range(j + 1)))
        for j in range(k + 1):
            out[j, live] = self.scale * psi[j] / L ** j
        return out

    def midpoint_value(self):
        return self.scale * np.exp(-(0.25 ** -self.p))


class Product1D(Profile1D):
    def __init__(self, *factors):
        self.factors = factors
        sup = [f.support for f in factors if f.support is not None]
        if sup:
            self.support = (max(s[0] for s in sup), min(s[1] for s in sup))
        self.breaks = tuple(sorted(set(b for f in factors for b in f.breaks)))

    def derivs(self, t, k):
        out = self.factors[0].derivs(t, k)
        for f in self.factors[1:]:
            d = f.derivs(t, k)
            new = np.zeros_like(out)
            for j in range(k + 1):
                for i in range(j + 1):
                    new[j] += comb(j, i) * out[i] * d[j - i]
            out = new
        return out


def unit_integral_bump(a, b, sigma=2.0):
    base = Bump1D(a, b, sigma)
    return base.scaled(1.0 / base.integral())


# ---------------------------------------------------------------------------
# separable fields
# ---------------------------------------------------------------------------

class SeparableField(ScalarField):
    """``sum_t coef_t * prod_j profile_{t,j}(x_j)``.

    Parameters
    ----------
    terms : list of (float, sequence of Profile1D)
    """

    def __init__(self, terms, fd_step=None):
        terms = [(float(c), tuple(ps)) for c, ps in terms]
        if not terms:
            raise ValueError("at least one term required")
        dim = len(terms[0][1])
        self.terms = terms
        lo, hi, bounded = [], [], True
        for _, ps in terms:
            if any(p.support is None for p in ps):
                bounded = False
                break
            lo.append([p.support[0] for p in ps])
            hi.append([p.support[1] for p in ps])
        support = Box(np.min(lo, axis=0), np.max(hi, axis=0)) if bounded else None
        breaks = tuple(tuple(sorted(set(b for _, ps in terms for b in ps[i].breaks)))
                       for i in range(dim))
        if not any(breaks):
            breaks = None
        super().__init__(dim, support, 0.0, breaks, fd_step)

    # combine ---------------------------------------------------------------
    def scaled(self, s):
        return SeparableField([(s * c, ps) for c, ps in self.terms], self.fd_step)

    def plus(self, other, s=1.0):
        return SeparableField(self.terms + [(s * c, ps) for c, ps in other.terms], self.fd_step)

    @staticmethod
    def combine(fields, coefs):
        terms = []
        for f, c in zip(fields, coefs):
            terms += [(c * tc, ps) for tc, ps in f.terms]
        return SeparableField(terms)

    def times(self, other):
        terms = [(c1 * c2, tuple(Product1D(a, b) for a, b in zip(p1, p2)))
                 for c1, p1 in self.terms for c2, p2 in other.terms]
        return SeparableField(terms)

    # evaluation -------------------------------------------------------------
    def _axis_derivs(self, x, k):
        # per term, per axis derivative tables
        return [[p.derivs(x[:, j], k) for j, p in enumerate(ps)] for _, ps in self.terms]

    def _partial_raw(self, alpha, x, tables=None):
        k = max(alpha)
        tables = tables or self._axis_derivs(x, k)
        out = np.zeros(len(x))
        for (c, _), tab in zip(self.terms, tables):
            v = np.full(len(x), c)
            for j, a in enumerate(alpha):
                v = v * tab[j][a]
            out += v
        return out

    def _eval(self, x):
        return self._partial_raw((0,) * self.dim, x)

    def _grad(self, x):
        tabs = self._axis_derivs(x, 1)
        out = np.empty(x.shape)
        for i in range(self.dim):
            a = [0] * self.dim
            a[i] = 1
            out[:, i] = self._partial_raw(a, x, tabs)
        return out

    def _hess(self, x):
        tabs = self._axis_derivs(x, 2)
        n = self.dim
        out = np.empty((len(x), n, n))
        for i in range(n):
            for j in range(i, n):
                a = [0] * n
                a[i] += 1
                a[j] += 1
                out[:, i, j] = out[:, j, i] = self._partial_raw(a, x, tabs)
        return out

    def has_partials(self):
        return True

    def partial(self, alpha, x):
        x = _as_points(x, self.dim)
        out = np.zeros(len(x))
        m = self._mask(x)
        if m is None:
            return self._partial_raw(tuple(alpha), x)
        if m.any():
            out[m] = self._partial_raw(tuple(alpha), x[m])
        return out

    def integral(self, box: Box, nodes=64):
        """Exact-up-to-1D-quadrature integral over a box."""
        tot = 0.0
        for c, ps in self.terms:
            v = c
            for j, p in enumerate(ps):
                v *= p.integral(box.lo[j], box.hi[j], nodes)
            tot += v
        return tot

    # tensor grids -----------------------------------------------------------
    def grid_derivs(self, axes, A=None):
        """Value, gradient and (optionally) ``sum_ij A_ij d_ij`` on a tensor grid.

        Returns
        -------
        v : ndarray, grid shape
        g : list of ndarray, one per axis
        trA : ndarray or None
        """
        n = self.dim
        shape = tuple(len(a) for a in axes)
        v = np.zeros(shape)
        g = [np.zeros(shape) for _ in range(n)]
        trA = None if A is None else np.zeros(shape)
        k = 1 if A is None else 2

        def outer(facs):
            out = facs[0]
            for f in facs[1:]:
                out = np.multiply.outer(out, f)
            return out

        for c, ps in self.terms:
            tab = [p.derivs(np.asarray(axes[j], dtype=float), k) for j, p in enumerate(ps)]
            v += c * outer([t[0] for t in tab])
            for i in range(n):
                g[i] += c * outer([tab[j][1 if j == i else 0] for j in range(n)])
            if A is not None:
                for i in range(n):
                    for j in range(n):
                        if A[i, j] == 0.0:
                            continue
                        orders = [0] * n
                        orders[i] += 1
                        orders[j] += 1
                        trA += c * A[i, j] * outer([tab[l][orders[l]] for l in range(n)])
        return v, g, trA

    def eval_grid(self, axes):
        return self.grid_derivs(axes)[0]
