"""Truncated Gevrey seminorms, compactly supported bumps and related constants."""
from __future__ import annotations

from dataclasses import dataclass
from math import comb, factorial

import numpy as np

from .errors import (BoundInapplicableError, EvaluationError,
                     NonQuasianalyticError, RadiusOrderError)
from .profiles import Bump1D, SeparableField
from .tensorfield import Box, Product, ScalarField, _as_points


@dataclass(frozen=True)
class GevreyBudget:
    """Order ``sigma``, radius ``tau`` and truncation order ``M`` of a seminorm."""

    sigma: float = 2.0
    tau: float = 0.5
    truncation_order: int = 8

    def __post_init__(self):
        if self.sigma < 1:
            raise ValueError("sigma must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if int(self.truncation_order) != self.truncation_order or self.truncation_order < 0:
            raise ValueError("truncation order must be a nonnegative integer")


@dataclass(frozen=True)
class BumpSpec:
    box: Box
    sigma: float = 2.0
    normalization: str = "none"  # none | unit-integral | unit-sup

    def __post_init__(self):
        if self.sigma <= 1:
            raise NonQuasianalyticError(
                f"compact support needs sigma > 1, got {self.sigma}")
        if self.normalization not in ("none", "unit-integral", "unit-sup"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def _profile(a, b, sigma, normalization):
    p = Bump1D(a, b, sigma)
    if normalization == "unit-integral":
        return p.scaled(1.0 / p.integral())
    if normalization == "unit-sup":
        return p.scaled(1.0 / p.midpoint_value())
    return p


def bump_1d(spec: BumpSpec) -> SeparableField:
    """One-dimensional bump on ``spec.box`` (a 1D box)."""
    if spec.box.dim != 1:
        raise ValueError("bump_1d expects an interval")
    p = _profile(spec.box.lo[0], spec.box.hi[0], spec.sigma, spec.normalization)
    f = SeparableField([(1.0, (p,))])
    f.profile = p
    return f


def bump_box(spec: BumpSpec) -> SeparableField:
    """Tensor product of per-axis bumps, normalized axis by axis."""
    ps = tuple(_profile(spec.box.lo[i], spec.box.hi[i], spec.sigma, spec.normalization)
               for i in range(spec.box.dim))
    f = SeparableField([(1.0, ps)])
    f.profiles = ps
    return f


# ---------------------------------------------------------------------------
# seminorms
# ---------------------------------------------------------------------------

def multi_indices(n, order):
    """All multi-indices of length n with |alpha| == order."""
    if n == 1:
        yield (order,)
        return
    for a in range(order, -1, -1):
        for rest in multi_indices(n - 1, order - a):
            yield (a,) + rest


def _fd_partial(f, alpha, x, step):
    # nested centered differences, one axis at a time
    pts = [(1.0, np.zeros(x.shape[1]))]
    for i, a in enumerate(alpha):
        if a == 0:
            continue
        new = []
        for j in range(a + 1):
            w = (-1) ** j * comb(a, j) / step ** a
            for c, off in pts:
                o = off.copy()
                o[i] += (a / 2 - j) * step
                new.append((c * w, o))
        pts = new
    return sum(c * f.eval(x + off) for c, off in pts)


def partial_derivative(f: ScalarField, alpha, x):
    """``d^alpha f`` at points: exact when the field supports it, else differences."""
    alpha = tuple(int(a) for a in alpha)
    k = sum(alpha)
    if f.has_partials():
        return f.partial(alpha, x)
    if k == 0:
        return f.eval(x)
    if k == 1:
        return f.grad(x)[:, alpha.index(1)]
    if k == 2:
        idx = [i for i, a in enumerate(alpha) for _ in range(a)]
        return f.hess(x)[:, idx[0], idx[1]]
    return _fd_partial(f, alpha, x, 1e-2 / k)


def seminorm(f: ScalarField, K: Box, budget: GevreyBudget, lattice=17, report=False):
    """Truncated seminorm ``sum_{|a|<=M} tau^|a| (a!)^-sigma sup_K |d^a f|``.

    The sup is taken over a ``lattice``-per-axis grid of K, so values are
    lower bounds of the exact truncated sum.

    Parameters
    ----------
    report : bool
        When true return a dict with the per-order contributions as well.
    """
    x = K.lattice(lattice)
    shells = []
    for k in range(budget.truncation_order + 1):
        tot = 0.0
        for alpha in multi_indices(K.dim, k):
            d = partial_derivative(f, alpha, x)
            if not np.all(np.isfinite(d)):
                raise EvaluationError(f"non-finite derivative of order {alpha}")
            afact = np.prod([factorial(a) for a in alpha], dtype=float)
            tot += budget.tau ** k / afact ** budget.sigma * float(np.max(np.abs(d)))
        shells.append(float(tot))
    value = float(sum(shells))
    if not report:
        return value
    mode = "exact" if f.has_partials() else "analytic<=2, differences above"
    return {"value": value, "shells": shells, "last_shell": shells[-1],
            "derivatives": mode}


def derivative_loss_constant(sigma, tau, tau_prime):
    """``(1/tau) sup_{m>=1} m^sigma (tau'/tau)^(m-1)``.

    The log of the summand is concave in m, so the scan stops once the
    terms have decreased for ten consecutive m; the remaining tail is
    bounded by the last value.
    """
    if not 0 <= tau_prime < tau:
        raise RadiusOrderError(f"need 0 <= tau' < tau, got tau'={tau_prime}, tau={tau}")
    r = tau_prime / tau
    if r == 0.0:
        return 1.0 / tau
    lr = np.log(r)
    best, prev, down, m = -np.inf, -np.inf, 0, 1
    while down < 10:
        v = sigma * np.log(m) + (m - 1) * lr
        best = max(best, v)
        down = down + 1 if v < prev else 0
        prev = v
        m += 1
    return float(np.exp(best)) / tau


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def algebra_check(f: ScalarField, g: ScalarField, K: Box, budget: GevreyBudget, lattice=17):
    fg = Product(f, g)
    a = seminorm(fg, K, budget, lattice)
    b = seminorm(f, K, budget, lattice)
    c = seminorm(g, K, budget, lattice)
    # relative slack for rounding in the equality cases
    return {"product": a, "f": b, "g": c, "holds": bool(a <= b * c * (1 + 1e-12))}


class Reciprocal(ScalarField):
    """``1/(1 + h)`` with exact partials built recursively from those of h."""

    def __init__(self, h: ScalarField):
        super().__init__(h.dim, h.support, 1.0 / (1.0 + h.background), h.breaks)
        self.h = h

    def _eval(self, x):
        return 1.0 / (1.0 + self.h.eval(x))

    def _grad(self, x):
        r = self._eval(x)
        return -(r ** 2)[:, None] * self.h.grad(x)

    def has_partials(self):
        return self.h.has_partials()

    def partial(self, alpha, x):
        x = _as_points(x, self.dim)
        memo = {}
        hp = {}

        def hpart(b):
            if b not in hp:
                hp[b] = self.h.partial(b, x)
            return hp[b]

        base = 1.0 / (1.0 + hpart((0,) * self.dim))

        # (1+h) r = 1  =>  d^a r = -(1/(1+h)) sum_{0<b<=a} C(a,b) d^b h d^{a-b} r
        def rec(a):
            if a in memo:
                return memo[a]
            if sum(a) == 0:
                memo[a] = base
                return base
            acc = 0.0
            for b in np.ndindex(*[ai + 1 for ai in a]):
                if sum(b) == 0:
                    continue
                w = np.prod([comb(ai, bi) for ai, bi in zip(a, b)])
                acc = acc + w * hpart(tuple(b)) * rec(tuple(ai - bi for ai, bi in zip(a, b)))
            memo[a] = -base * acc
            return memo[a]

        return rec(tuple(int(a) for a in alpha))


def reciprocal_bound_check(h: ScalarField, K: Box, budget: GevreyBudget, lattice=17):
    nh = seminorm(h, K, budget, lattice)
    if nh >= 1:
        raise BoundInapplicableError(f"Neumann bound needs |h| < 1, got {nh:.6g}")
    nr = seminorm(Reciprocal(h), K, budget, lattice)
    bound = 1.0 / (1.0 - nh)
    return {"reciprocal": nr, "h": nh, "bound": bound, "holds": bool(nr <= bound * (1 + 1e-12))}
