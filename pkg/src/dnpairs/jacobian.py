"""Compactly supported divergence primitives and Moser flows.

``div_primitive`` solves ``div X = h - m * beta`` on a box, where ``beta``
is the product of per-axis unit-integral cutoffs and ``m`` the mean of h
(zero for admissible data). Two routes are provided:

* ``separable``: h is a finite sum of tensor products of 1D profiles and
  every fiber integral is a 1D primitive evaluated by Gauss quadrature.
* ``spline``: h (n = 3) is replaced by its tensor quintic interpolant on a
  graded grid of K0; fiber integrals of the interpolant are exact spline
  antiderivatives, so ``div X`` equals the interpolant density identically.

``moser_flow`` integrates ``dphi/dt = X/rho_t`` with
``rho_t = 1 + (1 - t) h`` by RK4 together with the variational equation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import BSpline, make_interp_spline

from . import _splines
from .errors import (DensityPositivityError, InversionError,
                     MeanConstraintError, ResolutionError, SupportError,
                     UnsupportedDimensionError)
from .gevrey import GevreyBudget, seminorm
from .profiles import Bump1D, Const1D, SeparableField
from .quadrature import DEFAULT, ORACLE, QuadratureRule
from .tensorfield import (Box, Constant, Diffeo, LinearCombination,
                          ScalarField, _as_points, _fd_jac, merge_breaks)


def make_cutoffs(K0: Box, sigma=2.0):
    """Unit-integral bumps on the intervals of K0, one per axis."""
    out = []
    for i in range(K0.dim):
        b = Bump1D(K0.lo[i], K0.hi[i], sigma)
        out.append(b.scaled(1.0 / b.integral()))
    return out


def cutoff_product(cutoffs) -> SeparableField:
    """``beta(x) = prod_j theta_j(x_j)``."""
    return SeparableField([(1.0, tuple(cutoffs))])


def div_constant(Q: Box, budget: GevreyBudget, cutoffs, lattice=17):
    """Recursive constant ``(|I1|+tau)(1+|I1| T1) + |I1| T1 C(Q')``.

    ``T_j`` is the truncated seminorm of the j-th cutoff on ``I_j``; the 1D
    base case is ``|I1| + tau``.
    """
    L = Q.hi[0] - Q.lo[0]
    if Q.dim == 1:
        return L + budget.tau
    th = SeparableField([(1.0, (cutoffs[0],))])
    T1 = seminorm(th, Q.interval(0), budget, lattice)
    rest = div_constant(Q.drop_first(), budget, cutoffs[1:], lattice)
    return (L + budget.tau) * (1 + L * T1) + L * T1 * rest


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

class DensityField(ScalarField):
    """Exact divergence of a primitive exposed as a scalar field."""

    def __init__(self, prim):
        super().__init__(prim.dim, prim.support, 0.0, prim.breaks)
        self.prim = prim

    def _eval(self, x):
        return self.prim.evaluate(x)[2]

    def _grad(self, x):
        return self.prim.evaluate(x)[3]


class DivergencePrimitive:
    """Compactly supported vector field X with ``div X`` known exactly.

    Attributes
    ----------
    support : Box
        K0; X vanishes identically outside it.
    mean : float
        Mass ``m`` removed through the cutoff product.
    constant_bound : float
        Recursive divergence constant for the default budget.
    route : str
    """

    route = "abstract"

    def __init__(self, support, cutoffs, mean, breaks=None, budget=None):
        self.support = support
        self.dim = support.dim
        self.cutoffs = cutoffs
        self.mean = float(mean)
        self.breaks = breaks
        self.budget = budget or GevreyBudget(sigma=cutoffs[0].sigma, tau=0.5)
        self._bound = None

    @property
    def constant_bound(self):
        if self._bound is None:
            self._bound = div_constant(self.support, self.budget, self.cutoffs)
        return self._bound

    def evaluate(self, x):
        """Return ``(X, DX, div X, grad div X)`` at points."""
        raise NotImplementedError

    def X(self, x):
        return self.evaluate(_as_points(x, self.dim))[0]

    __call__ = X

    def DX(self, x):
        return self.evaluate(_as_points(x, self.dim))[1]

    def divergence(self, x):
        return self.evaluate(_as_points(x, self.dim))[2]

    @property
    def density(self) -> ScalarField:
        return DensityField(self)

    def fd_divergence(self, x, step=1e-4):
        """Centered-difference divergence of the components (an oracle)."""
        x = _as_points(x, self.dim)
        out = np.zeros(len(x))
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = step
            out += (self.X(x + e)[:, i] - self.X(x - e)[:, i]) / (2 * step)
        return out


class ZeroPrimitive(DivergencePrimitive):
    route = "zero"

    def evaluate(self, x):
        x = _as_points(x, self.dim)
        n, N = self.dim, len(x)
        return np.zeros((N, n)), np.zeros((N, n, n)), np.zeros(N), np.zeros((N, n))


class SeparablePrimitive(DivergencePrimitive):
    """Primitive of a separable density, fiber integrals by 1D Gauss rules."""

    route = "separable"

    def __init__(self, h: SeparableField, K0: Box, cutoffs, nodes=64, budget=None):
        n = h.dim
        self.h = h
        self.nodes = nodes
        self.m = np.array([[p.integral(K0.lo[j], K0.hi[j], nodes) for j, p in enumerate(ps)]
                           for _, ps in h.terms])
        self.c = np.array([c for c, _ in h.terms])
        mean = float(np.sum(self.c * np.prod(self.m, axis=1)))
        super().__init__(K0, cutoffs, mean, merge_breaks(h.breaks, _cut_breaks(cutoffs)), budget)

    def evaluate(self, x):
        x = _as_points(x, self.dim)
        n, N = self.dim, len(x)
        X = np.zeros((N, n))
        DX = np.zeros((N, n, n))
        hv = np.zeros(N)
        gh = np.zeros((N, n))
        inside = self.support.inside(x, closed=False)
        if not inside.any():
            return X, DX, hv, gh
        y = x[inside]
        M = len(y)
        lo = self.support.lo
        th = [c.derivs(y[:, j], 1) for j, c in enumerate(self.cutoffs)]
        Th = [c.primitive(y[:, j], lo[j], self.nodes) for j, c in enumerate(self.cutoffs)]
        tabs = [[p.derivs(y[:, j], 2) for j, p in enumerate(ps)] for _, ps in self.h.terms]
        prims = [[p.primitive(y[:, j], lo[j], self.nodes) for j, p in enumerate(ps)]
                 for _, ps in self.h.terms]
        Xi = np.zeros((M, n))
        DXi = np.zeros((M, n, n))
        for d in range(n):
            for t, (c, _) in enumerate(self.h.terms):
                w = c * np.prod(self.m[t, :d])
                if w == 0.0:
                    continue
                # factor values and slopes per axis for this level and term
                val = []
                slope = []
                for j in range(n):
                    if j < d:
                        val.append(th[j][0])
                        slope.append(th[j][1])
                    elif j == d:
                        val.append(prims[t][j] - self.m[t, j] * Th[j])
                        slope.append(tabs[t][j][0] - self.m[t, j] * th[j][0])
                    else:
                        val.append(tabs[t][j][0])
                        slope.append(tabs[t][j][1])
                Xi[:, d] += w * np.prod(val, axis=0)
                for k in range(n):
                    fac = [slope[j] if j == k else val[j] for j in range(n)]
                    DXi[:, d, k] += w * np.prod(fac, axis=0)
        beta = np.prod([t_[0] for t_ in th], axis=0)
        hi_ = self.h._eval(y) - self.mean * beta
        ghi = self.h._grad(y)
        for k in range(n):
            fac = [th[j][1] if j == k else th[j][0] for j in range(n)]
            ghi[:, k] -= self.mean * np.prod(fac, axis=0)
        X[inside], DX[inside], hv[inside], gh[inside] = Xi, DXi, hi_, ghi
        return X, DX, hv, gh


def _cut_breaks(cutoffs):
    return tuple(tuple(c.breaks) for c in cutoffs)


def graded_axis(lo, hi, breaks, points, grading=3.0):
    """Grid on [lo, hi] clustered towards every breakpoint (tanh grading)."""
    edges = [lo] + sorted(b for b in breaks if lo < b < hi) + [hi]
    edges = np.asarray(edges)
    lens = np.diff(edges)
    counts = np.maximum(8, np.round((points - 1) * lens / lens.sum())).astype(int)
    parts = []
    for a, b, k in zip(edges[:-1], edges[1:], counts):
        s = np.arange(k + 1) / k
        z = np.tanh(grading * (2 * s - 1)) / np.tanh(grading)
        seg = a + (b - a) * (z + 1) / 2
        parts.append(seg if not parts else seg[1:])
    return np.concatenate(parts)


def _fit_tensor(axes, values, k=5):
    c = values
    knots = []
    for ax, g in enumerate(axes):
        s = make_interp_spline(g, np.moveaxis(c, ax, 0), k=k)
        c = np.moveaxis(s.c, 0, ax)
        knots.append(s.t)
    return knots, np.ascontiguousarray(c)


def sample_on_grid(h: ScalarField, axes, chunk=400_000):
    """Values of h on a tensor grid; uses ``h.eval_grid`` when available."""
    if hasattr(h, "eval_grid"):
        return h.eval_grid(axes)
    g = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([v.ravel() for v in g], axis=1)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = h.eval(pts[s:s + chunk])
    return out.reshape(g[0].shape)


class SplinePrimitive(DivergencePrimitive):
    """Primitive of the tensor quintic interpolant of h on a graded grid of K0."""

    route = "spline"

    def __init__(self, h: ScalarField, K0: Box, cutoffs, points=129, grading=3.0,
                 budget=None, theta_points=4001):
        if K0.dim != 3:
            raise UnsupportedDimensionError("spline route implemented for n = 3")
        br = h.breaks or ((),) * 3
        self.axes = [graded_axis(K0.lo[j], K0.hi[j], br[j], points, grading) for j in range(3)]
        vals = sample_on_grid(h, self.axes)
        self.sample_max = float(np.max(np.abs(vals)))
        k = 5
        (t1, t2, t3), C = _fit_tensor(self.axes, vals, k)
        S1 = BSpline(t1, C, k).antiderivative()
        self._t1, self._c1 = S1.t, np.ascontiguousarray(S1.c)
        self._t2, self._t3 = t2, t3
        self._cH = np.ascontiguousarray(S1.c[-1])
        SH = BSpline(t2, self._cH, k).antiderivative()
        self._tS2, self._cS = SH.t, np.ascontiguousarray(SH.c)
        self._cH2 = np.ascontiguousarray(SH.c[-1])
        SH2 = BSpline(t3, self._cH2, k).antiderivative()
        self._tL2, self._cSH2 = SH2.t, np.ascontiguousarray(SH2.c)
        self.k = k
        mean = float(SH2.c[-1])
        # cutoff primitives, tabulated once at quadrature accuracy
        self._Theta = []
        for j, c in enumerate(cutoffs):
            g = np.linspace(K0.lo[j], K0.hi[j], theta_points)
            s = make_interp_spline(g, c.primitive(g, K0.lo[j]), k=5)
            self._Theta.append((s.t, np.ascontiguousarray(s.c)))
        self._th_a = np.array([c.a for c in cutoffs])
        self._th_b = np.array([c.b for c in cutoffs])
        self._th_s = np.array([c.scale for c in cutoffs])
        self._th_p = cutoffs[0].p
        if any(c.p != self._th_p for c in cutoffs):
            raise ValueError("cutoffs must share one bump order")
        super().__init__(K0, cutoffs, mean, tuple(tuple(b) for b in br), budget)
        self._lo = np.asarray(K0.lo, dtype=float)
        self._hi = np.asarray(K0.hi, dtype=float)

    def interpolant_error(self, h: ScalarField, pts):
        """``max |h - h_hat|`` at points, with ``h_hat = d1 S1``."""
        x = _as_points(pts, 3)
        S = np.empty((len(x), 7))
        inside = self.support.inside(x, closed=False)
        xi = np.ascontiguousarray(x[inside])
        _splines.eval3(self._t1, self.k + 1, self._t2, self.k, self._t3, self.k, self._c1, xi,
                       S[:len(xi)])
        hh = np.zeros(len(x))
        hh[inside] = S[:len(xi), 1]
        return float(np.max(np.abs(h.eval(x) - hh)))

    def evaluate(self, x):
        x = np.ascontiguousarray(_as_points(x, 3))
        N = len(x)
        X = np.empty((N, 3))
        DX = np.empty((N, 3, 3))
        hv = np.empty(N)
        gh = np.empty((N, 3))
        (tT1, cT1), (tT2, cT2), (tT3, cT3) = self._Theta
        _splines.primitive_field(
            x, self._lo, self._hi,
            self._t1, self._c1, self.k + 1, self._t2, self._t3, self.k,
            self._cH, self._tS2, self._cS, self._cH2, self._tL2, self._cSH2, self.mean,
            self._th_a, self._th_b, self._th_p, self._th_s,
            tT1, cT1, tT2, cT2, tT3, cT3, 5,
            X, DX, hv, gh)
        return X, DX, hv, gh


def _support_of(h: ScalarField):
    if h.support is None:
        raise SupportError("density must have a compact support box")
    return h.support


def div_primitive(h: ScalarField, Q: Box, cutoffs=None, quad: QuadratureRule | None = None,
                  K0: Box | None = None, route="auto", project_mean=False,
                  mean_tol=1e-9, points=129, grading=3.0, budget=None):
    """Compactly supported X with ``div X = h - m beta``.

    Parameters
    ----------
    h : ScalarField
        Density supported inside Q.
    Q : Box
    cutoffs : list of Profile1D, optional
        Unit-integral per-axis bumps; by default built on K0.
    quad : QuadratureRule
        Rule used for the mean test.
    K0 : Box, optional
        Support of X; defaults to the support box of h.
    route : {"auto", "separable", "spline"}
    project_mean : bool
        Accept nonzero mean and remove it through the cutoff product;
        otherwise the quadrature mean must be below ``mean_tol`` (relative
        to ``int |h|``).
    """
    quad = quad or ORACLE
    if isinstance(h, Constant):
        if h.value != 0.0:
            raise SupportError("nonzero constant density has no compact support")
        K0 = K0 or Q
        cutoffs = cutoffs or make_cutoffs(K0)
        return ZeroPrimitive(K0, cutoffs, 0.0, None, budget)
    sup = _support_of(h)
    if not Q.contains(sup):
        raise SupportError(f"density support {sup} escapes {Q}")
    K0 = K0 or sup
    if not K0.contains(sup) or not Q.contains(K0):
        raise SupportError("need supp h inside K0 inside Q")
    cutoffs = cutoffs or make_cutoffs(K0)
    brk = merge_breaks(h.breaks, _cut_breaks(cutoffs))
    if not project_mean:
        if isinstance(h, SeparableField):
            mass = h.integral(Q)
            scale = sum(abs(c) * np.prod([p.integral(Q.lo[j], Q.hi[j]) for j, p in enumerate(ps)])
                        for c, ps in h.terms)
        else:
            mass = quad.integrate(h.eval, Q, brk)
            scale = quad.integrate(lambda x: np.abs(h.eval(x)), Q, brk)
        if abs(mass) > mean_tol * max(scale, 1e-300):
            raise MeanConstraintError(f"density mean {mass:.3e} is not zero")
    if route == "auto":
        route = "separable" if isinstance(h, SeparableField) else "spline"
    if route == "separable":
        if not isinstance(h, SeparableField):
            raise ValueError("separable route needs a SeparableField")
        return SeparablePrimitive(h, K0, cutoffs, budget=budget)
    if route == "spline":
        return SplinePrimitive(h, K0, cutoffs, points, grading, budget)
    raise ValueError(f"unknown route {route!r}")


# ---------------------------------------------------------------------------
# Moser flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowResult:
    Psi: "FlowDiffeo"
    jac_mode: str
    steps: int
    drift: float
    density_gap: float = 0.0


class FlowDiffeo(Diffeo):
    """Time-one map of ``dphi/dt = X(phi)/(1 + (1-t) h(phi))``.

    ``h`` is the exact divergence of the primitive X, so the Jacobian
    determinant of the map is ``1 + h``. Forward and backward maps are
    integrated on demand with RK4 and the variational equation; the
    inverse is polished by Newton steps on the forward map.
    """

    def __init__(self, prim: DivergencePrimitive, steps=64, polish=1, chunk=50_000):
        super().__init__(prim.dim, prim.support)
        self.prim = prim
        self.steps = int(steps)
        self.polish = int(polish)
        self.chunk = chunk
        self.breaks = prim.breaks

    def with_polish(self, polish):
        return FlowDiffeo(self.prim, self.steps, polish, self.chunk)

    def with_steps(self, steps):
        return FlowDiffeo(self.prim, steps, self.polish, self.chunk)

    def _rhs(self, t, y, J):
        X, DX, h, gh = self.prim.evaluate(y)
        rho = 1.0 + (1.0 - t) * h
        if np.any(rho <= 0):
            raise DensityPositivityError(f"density {rho.min():.3e} <= 0 at t={t:.3f}")
        A = X / rho[:, None]
        if J is None:
            return A, None, h
        DA = DX / rho[:, None, None] - (1.0 - t) * X[:, :, None] * gh[:, None, :] / (rho ** 2)[:, None, None]
        return A, DA @ J, h

    def integrate(self, x, t0=0.0, t1=1.0, variational=True, track=False):
        """RK4 from t0 to t1; returns end points, Jacobians and (optionally) drift."""
        y = np.array(x, dtype=float)
        n = self.steps
        dt = (t1 - t0) / n
        J = np.broadcast_to(np.eye(self.dim), (len(y), self.dim, self.dim)).copy() if variational else None
        drift = 0.0
        h0 = None
        for s in range(n):
            t = t0 + s * dt
            k1, j1, h = self._rhs(t, y, J)
            if track:
                if h0 is None:
                    h0 = h.copy()
                rho = 1.0 + (1.0 - t) * h
                drift = max(drift, float(np.max(np.abs(rho * np.linalg.det(J) - (1.0 + h0)))))
            k2, j2, _ = self._rhs(t + dt / 2, y + dt / 2 * k1, None if J is None else J + dt / 2 * j1)
            k3, j3, _ = self._rhs(t + dt / 2, y + dt / 2 * k2, None if J is None else J + dt / 2 * j2)
            k4, j4, _ = self._rhs(t + dt, y + dt * k3, None if J is None else J + dt * j3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if J is not None:
                J = J + dt / 6 * (j1 + 2 * j2 + 2 * j3 + j4)
        if track:
            # rho_1 = 1
            drift = max(drift, float(np.max(np.abs(np.linalg.det(J) - (1.0 + h0)))))
        return y, J, drift

    def _chunked(self, fn, x):
        outs = [fn(x[s:s + self.chunk]) for s in range(0, len(x), self.chunk)]
        return tuple(np.concatenate(parts) for parts in zip(*outs))

    def _forward(self, x):
        return self._chunked(lambda z: self.integrate(z, variational=False)[:1], x)[0]

    def _jac(self, x):
        return self._chunked(lambda z: self.integrate(z)[1:2], x)[0]

    def _forward_and_jac(self, x):
        return self._chunked(lambda z: self.integrate(z)[:2], x)

    def fd_jac(self, x, step=1e-5):
        """Centered-difference Jacobian of the forward map (an oracle)."""
        return _fd_jac(self.forward, _as_points(x, self.dim), step)

    def _newton(self, y):
        def back(z):
            x, Jb, _ = self.integrate(z, 1.0, 0.0, variational=self.polish == 0)
            return (x,) if self.polish else (x, np.linalg.inv(Jb))

        res = self._chunked(back, y)
        x = res[0]
        if self.polish == 0:
            return x, res[1]
        for _ in range(self.polish):
            F, J = self._forward_and_jac(x)
            x = x - np.linalg.solve(J, (F - y)[:, :, None])[:, :, 0]
        if not np.all(np.isfinite(x)):
            bad = int(np.argmax(~np.isfinite(x).all(axis=1)))
            raise InversionError("flow inversion produced non-finite points", point=y[bad].tolist())
        return x, J


def moser_flow(h: ScalarField | None, X: DivergencePrimitive, steps=64, check_points=None,
               polish=1) -> FlowResult:
    """Moser flow of a primitive; drift is measured on ``check_points``.

    The density of the flow is the exact divergence carried by X. When h is
    given its distance to that divergence is reported as ``density_gap``.
    """
    if steps < 8:
        raise ResolutionError(f"at least 8 RK4 steps required, got {steps}")
    pts = X.support.lattice(10) if check_points is None else _as_points(check_points, X.dim)
    dens = X.evaluate(pts)[2]
    if np.max(np.abs(dens)) > 0.5:
        raise DensityPositivityError(
            f"sup |h| = {np.max(np.abs(dens)):.3f} exceeds 1/2")
    gap = 0.0 if h is None else float(np.max(np.abs(h.eval(pts) - dens)))
    psi = FlowDiffeo(X, steps, polish)
    inside = X.support.inside(pts, closed=False)
    drift = 0.0
    if inside.any():
        drift = psi.integrate(pts[inside], track=True)[2]
    return FlowResult(psi, "variational", int(steps), float(drift), gap)


@dataclass(frozen=True)
class JacobianConfig:
    steps: int = 64
    sigma: float = 2.0
    route: str = "auto"
    points: int = 129
    grading: float = 3.0
    quad: QuadratureRule = field(default=DEFAULT)
    polish: int = 1
    tau: float = 0.5  # seminorm radius for the reported divergence constant


def mean_projection(h: ScalarField, Q: Box, beta: ScalarField, quad: QuadratureRule):
    """``h - (int_Q h) beta`` and the removed mass."""
    brk = merge_breaks(h.breaks, beta.breaks)
    m = quad.integrate(h.eval, Q, brk)
    if isinstance(h, SeparableField) and isinstance(beta, SeparableField):
        return h.plus(beta, -m), m
    out = LinearCombination([h, beta], [1.0, -m])
    out.support = h.support
    if hasattr(h, "eval_grid") and hasattr(beta, "eval_grid"):
        out.eval_grid = lambda axes: h.eval_grid(axes) - m * beta.eval_grid(axes)
    return out, m


def prescribed_jacobian(h: ScalarField, Q0: Box, Q: Box, config: JacobianConfig | None = None):
    """Diffeomorphism with ``det DPsi = 1 + h`` equal to the identity off Q0.

    Returns the flow diffeomorphism; the primitive, the flow report and the
    removed mean are attached as ``.primitive``, ``.flow`` and ``.mean_removed``.
    """
    config = config or JacobianConfig()
    if isinstance(h, Constant) and h.value == 0.0:
        prim = ZeroPrimitive(Q0, make_cutoffs(Q0, config.sigma), 0.0)
        psi = FlowDiffeo(prim, config.steps, config.polish)
        psi.primitive, psi.mean_removed = prim, 0.0
        psi.flow = FlowResult(psi, "variational", config.steps, 0.0)
        return psi
    sup = _support_of(h)
    if not Q0.contains(sup):
        raise SupportError(f"density support {sup} escapes {Q0}")
    if not Q.contains(Q0):
        raise SupportError("Q0 must lie inside Q")
    cut = make_cutoffs(Q0, config.sigma)
    hp, m = mean_projection(h, Q, cutoff_product(cut), config.quad)
    hp.support = Q0
    prim = div_primitive(hp, Q, cut, config.quad, K0=Q0, route=config.route,
                         project_mean=True, points=config.points, grading=config.grading,
                         budget=GevreyBudget(config.sigma, config.tau))
    res = moser_flow(hp, prim, config.steps, polish=config.polish)
    psi = res.Psi
    psi.primitive, psi.flow, psi.mean_removed, psi.projected = prim, res, m, hp
    return psi


def jacobian_certificate(psi: FlowDiffeo, target: ScalarField, pts):
    """Residuals of ``det DPsi = 1 + target`` with variational and FD Jacobians."""
    pts = _as_points(pts, psi.dim)
    J = psi.jac(pts)
    det = np.linalg.det(J)
    Jfd = psi.fd_jac(pts)
    t = target.eval(pts)
    return {"max_det_residual": float(np.max(np.abs(det - 1.0 - t))),
            "max_fd_det_gap": float(np.max(np.abs(np.linalg.det(Jfd) - det))),
            "max_fd_jac_gap": float(np.max(np.abs(Jfd - J))),
            "min_det": float(det.min())}
