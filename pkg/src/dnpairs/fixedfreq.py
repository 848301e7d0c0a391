"""Conductivity pairs with equal Dirichlet-to-Neumann maps at a fixed frequency.

Pipeline: a normalized test function u with two vanishing moments and
prescribed Dirichlet energy q; the conformal factor ``c = (1 + eps u)^alpha``;
the frequency ``lambda_eps`` making the adapted density f integrate to zero;
a diffeomorphism with ``det DPsi = 1 + f``; and the rescaled pair

    gamma2 = s c^2 gamma,   gamma1 = s Psi_* gamma,   s = lambda0 / lambda_eps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (BasisError, DegenerateFrequencyError, DivisionError,
                     EnergyThresholdError, ForbiddenSlopeError,
                     OscillationBudgetError, PathError, PositivityError,
                     SignError)
from .jacobian import JacobianConfig, jacobian_certificate, prescribed_jacobian
from .profiles import Bump1D, Cos1D, Product1D, SeparableField
from .quadrature import DEFAULT, ORACLE, QuadratureRule
from .tensorfield import (Box, IdentityDiffeo, MatrixField, ScalarField,
                          ScaledMatrix, UNIT_CUBE, _as_points,
                          det_invariant, merge_breaks,
                          pushforward_conductivity, volume_density)


def alpha_from(q, lambda0, n=3):
    """``alpha = lambda0 / (q - 2 lambda0)`` with admissibility checks."""
    if q == 2 * lambda0:
        raise DivisionError("q = 2 lambda0 makes alpha undefined")
    if lambda0 == 0:
        raise DegenerateFrequencyError("lambda0 must be nonzero")
    if lambda0 > 0 and q <= 2 * lambda0:
        raise DivisionError("positive lambda0 needs q > 2 lambda0")
    alpha = lambda0 / (q - 2 * lambda0)
    if 2 * alpha + 1 <= 0:
        raise DivisionError(f"2 alpha + 1 = {2 * alpha + 1:.3g} must be positive")
    if np.isclose(alpha, 0.5 - 1.0 / n, rtol=0, atol=1e-12):
        raise ForbiddenSlopeError(f"alpha = 1/2 - 1/n is excluded (q = {q})")
    return alpha


# ---------------------------------------------------------------------------
# powers of 1 + eps u
# ---------------------------------------------------------------------------

class PowerField(ScalarField):
    """``(1 + eps u)^p`` with chain-rule derivatives; equals 1 off supp u."""

    def __init__(self, u: ScalarField, eps, p):
        super().__init__(u.dim, u.support, 1.0, u.breaks)
        self.u, self.eps, self.p = u, float(eps), float(p)

    def _base(self, v):
        b = 1.0 + self.eps * v
        if np.any(b <= 0):
            raise PositivityError(f"1 + eps u = {b.min():.3e} is not positive")
        return b

    def _eval(self, x):
        return self._base(self.u.eval(x)) ** self.p

    def _grad(self, x):
        b = self._base(self.u.eval(x))
        return (self.p * self.eps * b ** (self.p - 1))[:, None] * self.u.grad(x)

    def _hess(self, x):
        b = self._base(self.u.eval(x))
        g = self.u.grad(x)
        p, e = self.p, self.eps
        return ((p * e * b ** (p - 1))[:, None, None] * self.u.hess(x)
                + (p * (p - 1) * e * e * b ** (p - 2))[:, None, None] * g[:, :, None] * g[:, None, :])

    def power(self, k):
        """``self ** k`` as another power field."""
        return PowerField(self.u, self.eps, self.p * k)

    def grid_terms(self, axes, A=None):
        """``c``, ``grad c`` and ``sum A_ij d_ij c`` on a tensor grid (separable u)."""
        v, g, tr = self.u.grid_derivs(axes, A)
        b = 1.0 + self.eps * v
        p, e = self.p, self.eps
        c = b ** p
        d1 = p * e * b ** (p - 1)
        gc = [d1 * gi for gi in g]
        trc = None
        if A is not None:
            quad = sum(A[i, j] * g[i] * g[j] for i in range(len(g)) for j in range(len(g)))
            trc = d1 * tr + p * (p - 1) * e * e * b ** (p - 2) * quad
        return c, gc, trc

    def eval_grid(self, axes):
        v = self.u.eval_grid(axes)
        return (1.0 + self.eps * v) ** self.p


def conformal_factor(u, alpha, eps) -> PowerField:
    """``c = (1 + eps u)^alpha``; requires ``1 + eps u > 0``."""
    uf = u.u if isinstance(u, MomentFunction) else u
    sup = getattr(u, "sup", None)
    if sup is None and uf.support is not None:
        sup = float(np.max(np.abs(uf.eval(uf.support.lattice(33)))))
    if sup is not None and eps * sup >= 1:
        raise PositivityError(f"eps * sup|u| = {eps * sup:.3f} >= 1")
    return PowerField(uf, eps, alpha)


# ---------------------------------------------------------------------------
# two-moment test function
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentConfig:
    sigma: float = 2.0
    n_start: int = 16
    n_max: int = 2 ** 14
    quad: QuadratureRule = field(default=QuadratureRule(48))
    energy_tol: float = 1e-6
    det_tol: float = 1e-10


@dataclass
class MomentFunction:
    u: SeparableField
    q: float
    moments: tuple
    l2_norm: float
    energy: float
    oscillation_N: int
    theta: float
    u0_energy: float
    basis_note: str
    sup: float

    def to_json(self):
        return {"q": self.q, "moments": list(self.moments), "l2_norm": self.l2_norm,
                "energy": self.energy, "oscillation_N": self.oscillation_N,
                "theta": self.theta, "u0_energy": self.u0_energy,
                "basis": self.basis_note, "sup_u": self.sup}


class _Grams:
    """Moments and Gram entries of separable candidates on a fixed tensor rule."""

    def __init__(self, gamma: MatrixField, box: Box, quad: QuadratureRule, breaks):
        self.pts, self.wts = quad.tensor(box, breaks)
        self.w = volume_density(gamma).eval(self.pts)
        G = gamma.eval(self.pts)
        self.G = G

    def values(self, f):
        return f.eval(self.pts), f.grad(self.pts)

    def L(self, vg):
        v, _ = vg
        return np.array([self.wts @ v, self.wts @ (v * self.w)])

    def ip(self, a, b):
        return float(self.wts @ (a[0] * b[0]))

    def energy(self, a, b):
        return float(self.wts @ np.einsum("ni,nij,nj->n", a[1], self.G, b[1]))


def _projector(grams, p1, p2, p3, det_tol):
    """Coefficients removing both moments with the basis (p1, p2), or a fallback."""
    v1, v2, v3 = (grams.values(p) for p in (p1, p2, p3))
    for basis, vals, note in (((p1, p2), (v1, v2), "p1,p2"), ((p1, p3), (v1, v3), "p1,p3")):
        M = np.column_stack([grams.L(vals[0]), grams.L(vals[1])])
        scale = np.abs(M).max() ** 2
        if abs(np.linalg.det(M)) >= det_tol * scale:
            return basis, vals, M, note
    # both bases degenerate: with constant w the two moment functionals are
    # proportional and a single correction along p1 removes both
    M = np.column_stack([grams.L(v1), 0.0 * grams.L(v1)])
    return (p1, p2), (v1, v2), M, "p1 (rank one: moment conditions coincide)"


def build_test_function(gamma: MatrixField, Q0: Box, q, config: MomentConfig | None = None):
    """Normalized u in Y with ``E_gamma(u) = q``; see module docstring."""
    cfg = config or MomentConfig()
    n = Q0.dim
    lo, hi = Q0.lo, Q0.hi
    mid = 0.5 * (lo[0] + hi[0])
    full = [Bump1D(lo[j], hi[j], cfg.sigma) for j in range(n)]
    full = [b.scaled(1.0 / b.midpoint_value()) for b in full]
    unit = [b.scaled(1.0 / b.integral()) for b in full]

    def half(a, b):
        p = Bump1D(a, b, cfg.sigma)
        return p.scaled(1.0 / p.integral())

    p1 = SeparableField([(1.0, (half(lo[0], mid),) + tuple(unit[1:]))])
    p2 = SeparableField([(1.0, (half(mid, hi[0]),) + tuple(unit[1:]))])
    q1 = 0.25 * (3 * lo[0] + hi[0])
    p3 = SeparableField([(1.0, (half(q1, q1 + 0.5 * (hi[0] - lo[0])),) + tuple(unit[1:]))])
    eta = SeparableField([(1.0, tuple(full))])
    breaks = merge_breaks(eta.breaks, p1.breaks, p2.breaks, p3.breaks)
    grams = _Grams(gamma, Q0, cfg.quad, breaks)
    basis, bvals, M, note = _projector(grams, p1, p2, p3, cfg.det_tol)
    Mp = np.linalg.pinv(M, rcond=1e-10)

    def project(f):
        vg = grams.values(f)
        rhs = grams.L(vg)
        a = Mp @ rhs
        if np.linalg.norm(M @ a - rhs) > 1e-10 * max(1.0, np.linalg.norm(rhs)):
            raise BasisError("moment conditions are inconsistent with the basis")
        g = SeparableField.combine([f, basis[0], basis[1]], [1.0, -a[0], -a[1]])
        v = (vg[0] - a[0] * bvals[0][0] - a[1] * bvals[1][0],
             vg[1] - a[0] * bvals[0][1] - a[1] * bvals[1][1])
        nrm = np.sqrt(grams.ip(v, v))
        return g.scaled(1.0 / nrm), (v[0] / nrm, v[1] / nrm)

    u0, v0 = project(eta)
    e0 = grams.energy(v0, v0)
    q0 = e0 + 1.0
    if q <= q0:
        raise EnergyThresholdError(f"q = {q} does not exceed q0 = {q0:.4g}")
    N = cfg.n_start
    while True:
        osc = SeparableField([(1.0, (Product1D(full[0], Cos1D(N)),) + tuple(full[1:]))])
        zN, vz = project(osc)
        if grams.energy(vz, vz) > 2 * q:
            break
        N *= 2
        if N > cfg.n_max:
            raise OscillationBudgetError(f"oscillation frequency exceeded {cfg.n_max}")
    vecs = (v0, vz)
    Gm = np.array([[grams.ip(a, b) for b in vecs] for a in vecs])
    Hm = np.array([[grams.energy(a, b) for b in vecs] for a in vecs])

    def E(th):
        c = np.array([1 - th, th])
        nn = c @ Gm @ c
        if nn < 1e-20:
            raise PathError("degenerate path point")
        return (c @ Hm @ c) / nn

    a, b = 0.0, 1.0
    if not E(a) < q < E(b):
        raise PathError("energy path does not bracket q")
    for _ in range(200):
        th = 0.5 * (a + b)
        if E(th) < q:
            a = th
        else:
            b = th
        if abs(E(th) - q) <= 0.1 * cfg.energy_tol and b - a < 1e-15:
            break
    th = 0.5 * (a + b)
    nn = np.sqrt(np.array([1 - th, th]) @ Gm @ np.array([1 - th, th]))
    u = SeparableField.combine([u0, zN], [(1 - th) / nn, th / nn])
    vu = grams.values(u)
    mom = grams.L(vu)
    sup = float(np.max(np.abs(u.eval(Q0.lattice(65)))))
    return MomentFunction(u, float(q), (float(mom[0]), float(mom[1])),
                          float(np.sqrt(grams.ip(vu, vu))), float(grams.energy(vu, vu)),
                          int(N), float(th), float(e0), note, sup)


def moment_oracle(gamma: MatrixField, mf: MomentFunction, box: Box, quad=ORACLE):
    """Moments, norm and energy of u recomputed with an independent rule."""
    u = mf.u
    w = volume_density(gamma)
    pts, wts = quad.tensor(box, u.breaks)
    v = u.eval(pts)
    g = u.grad(pts)
    G = gamma.eval(pts)
    return {"int_u": float(wts @ v), "int_uw": float(wts @ (v * w.eval(pts))),
            "l2_norm": float(np.sqrt(wts @ (v * v))),
            "energy": float(wts @ np.einsum("ni,nij,nj->n", g, G, g))}


# ---------------------------------------------------------------------------
# frequency and adapted density
# ---------------------------------------------------------------------------

def lambda_eps(gamma: MatrixField, c: PowerField, quad: QuadratureRule | None = None,
               parts=False):
    """``int gamma grad c . grad c / c^2  /  int (c^-2 - 1)`` over supp(c - 1)."""
    quad = quad or DEFAULT
    if c.eps == 0.0 or c.support is None:
        raise DegenerateFrequencyError("conformal factor is identically one")
    box = c.support
    pts, wts = quad.tensor(box, merge_breaks(c.breaks, gamma.breaks))
    v = c.eval(pts)
    g = c.grad(pts)
    num = float(wts @ (np.einsum("ni,nij,nj->n", g, gamma.eval(pts), g) / v ** 2))
    den = float(wts @ (v ** -2 - 1.0))
    if abs(den) <= 1e-12:
        raise DegenerateFrequencyError(f"denominator {den:.3e} vanishes")
    lam = num / den
    return (lam, num, den) if parts else lam


class AdaptedDensity(ScalarField):
    """``f = -div(gamma grad c)/(lambda c) + c^-2 - 1``."""

    def __init__(self, gamma: MatrixField, c: PowerField, lam):
        if lam == 0:
            raise DegenerateFrequencyError("lambda_eps must be nonzero")
        super().__init__(c.dim, c.support, 0.0, merge_breaks(c.breaks, gamma.breaks))
        self.gamma, self.c, self.lam = gamma, c, float(lam)

    def flux_divergence(self, x):
        """``div(gamma grad c)`` with the row divergence of gamma by differences."""
        x = _as_points(x, self.dim)
        G = self.gamma.eval(x)
        out = np.einsum("nij,nij->n", G, self.c.hess(x))
        if not self.gamma.constant:
            out += np.einsum("ni,ni->n", self.gamma.divergence(x), self.c.grad(x))
        return out

    def _eval(self, x):
        c = self.c.eval(x)
        return -self.flux_divergence(x) / (self.lam * c) + c ** -2 - 1.0

    def eval_grid(self, axes):
        if not self.gamma.constant or not hasattr(self.c.u, "grid_derivs"):
            raise AttributeError("grid evaluation needs a constant gamma")
        c, _, tr = self.c.grid_terms(axes, self.gamma.A)
        return -tr / (self.lam * c) + c ** -2 - 1.0

    def compatibility_residual(self, x):
        """Pointwise ``div(gamma grad c) + lambda(c - 1/c + c f)`` and its scale."""
        x = _as_points(x, self.dim)
        c = self.c.eval(x)
        d = self.flux_divergence(x)
        f = -d / (self.lam * c) + c ** -2 - 1.0
        res = d + self.lam * (c - 1.0 / c + c * f)
        scale = np.abs(d) + abs(self.lam) * (np.abs(c) + np.abs(1.0 / c) + np.abs(c * f))
        return res, scale


def adapted_density(gamma, c, lam) -> AdaptedDensity:
    return AdaptedDensity(gamma, c, lam)


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FreqConfig:
    q: float = 140.0
    Q0: Box = Box.cube(0.05, 0.95)
    Q: Box = Box.cube(0.025, 0.975)
    omega: Box = UNIT_CUBE
    moment: MomentConfig = field(default_factory=MomentConfig)
    jacobian: JacobianConfig = field(default_factory=JacobianConfig)
    quad: QuadratureRule = DEFAULT
    # lambda_eps sees the oscillating part of u inside few panels; 32 nodes
    # leave a 5e-6 relative error there, 64 nodes about 2e-9
    lambda_quad: QuadratureRule = ORACLE
    allow_degenerate: bool = False
    check_points: int = 10  # per axis inside Q0 for certificates


@dataclass
class FreqPair:
    gamma1: MatrixField
    gamma2: MatrixField
    lambda0: float
    lambda_eps: float
    s_eps: float
    eps: float
    Psi: object
    c_eps: ScalarField
    f_eps: ScalarField
    alpha: float
    gamma: MatrixField
    moment: MomentFunction | None
    certificates: dict = field(default_factory=dict)
    Q0: Box | None = None

    def to_json(self):
        return {"lambda0": self.lambda0, "lambda_eps": self.lambda_eps, "s_eps": self.s_eps,
                "eps": self.eps, "alpha": self.alpha,
                "moment": None if self.moment is None else self.moment.to_json(),
                "certificates": self.certificates}

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


def build_pair(gamma: MatrixField, lambda0, eps, config: FreqConfig | None = None,
               moment: MomentFunction | None = None) -> FreqPair:
    """Assemble the fixed-frequency pair for one eps."""
    cfg = config or FreqConfig()
    if lambda0 == 0:
        raise DegenerateFrequencyError("lambda0 must be nonzero")
    alpha = alpha_from(cfg.q, lambda0, gamma.dim)
    if eps == 0:
        if not cfg.allow_degenerate:
            raise DegenerateFrequencyError("eps = 0 gives a degenerate pair")
        one = PowerField(moment.u if moment else _zero_like(cfg.Q0), 0.0, alpha)
        return FreqPair(gamma, gamma, lambda0, lambda0, 1.0, 0.0, IdentityDiffeo(gamma.dim),
                        one, None, alpha, gamma, moment, {"degenerate": True}, cfg.Q0)
    mf = moment or build_test_function(gamma, cfg.Q0, cfg.q, cfg.moment)
    c = conformal_factor(mf, alpha, eps)
    lam = lambda_eps(gamma, c, cfg.lambda_quad)
    f = adapted_density(gamma, c, lam)
    s = lambda0 / lam
    if s <= 0:
        raise SignError(f"lambda_eps = {lam:.4g} has the wrong sign")
    psi = prescribed_jacobian(f, cfg.Q0, cfg.Q, cfg.jacobian)
    gamma2 = ScaledMatrix(c.power(2), gamma, s)
    gamma1 = pushforward_conductivity(gamma, psi.with_polish(0), s)
    pair = FreqPair(gamma1, gamma2, float(lambda0), float(lam), float(s), float(eps), psi, c, f,
                    float(alpha), gamma, mf, {}, cfg.Q0)
    pair.certificates.update(pair_certificates(pair, cfg))
    return pair


def _zero_like(box):
    return SeparableField([(0.0, tuple(Bump1D(box.lo[j], box.hi[j]) for j in range(box.dim)))])


def pair_certificates(pair: FreqPair, cfg: FreqConfig):
    """Jacobian, compatibility and mean-projection checks on a lattice in Q0."""
    pts = cfg.Q0.lattice(cfg.check_points)
    psi = pair.Psi
    jc = jacobian_certificate(psi, pair.f_eps, pts)
    res, scale = pair.f_eps.compatibility_residual(pts)
    ok = scale > 0
    rel = float(np.max(np.abs(res[ok]) / scale[ok])) if ok.any() else 0.0
    sup_f = float(np.max(np.abs(pair.f_eps.eval(pts))))
    prim = psi.primitive
    return {"jacobian": jc, "drift": psi.flow.drift, "compatibility_rel": rel,
            "mean_removed": psi.mean_removed, "interpolation_mean": prim.mean,
            "sup_f": sup_f, "route": prim.route}


def nonisometry_certificate(pair: FreqPair, quad: QuadratureRule | None = None,
                            omega: Box = UNIT_CUBE):
    """Determinant-invariant gap ``I(gamma2) - I(gamma1)`` versus its leading term.

    The invariant of gamma1 is split as ``I(s gamma)`` over the whole domain
    plus the correction over Q0, the only region where the pushforward
    differs from ``s gamma``; this keeps the flow evaluations inside Q0.
    """
    quad = quad or DEFAULT
    n = pair.gamma.dim
    s, a, e = pair.s_eps, pair.alpha, pair.eps
    Q0 = pair.Q0
    sg = ScaledMatrix(_one(n), pair.gamma, s)
    I_sg = det_invariant(sg, omega, quad)
    I_sg_Q0 = det_invariant(sg, Q0, quad)
    I1_Q0 = det_invariant(_with_breaks(pair.gamma1, pair.c_eps.breaks), Q0, quad)
    I1 = I_sg - I_sg_Q0 + I1_Q0
    I2 = det_invariant(_with_breaks(pair.gamma2, pair.c_eps.breaks), omega, quad)
    I_gamma = det_invariant(pair.gamma, omega, quad)
    w = volume_density(pair.gamma)
    u = pair.moment.u
    pts, wts = quad.tensor(Q0, u.breaks)
    u2w = float(wts @ (u.eval(pts) ** 2 * w.eval(pts)))
    k = n / (n - 2)
    coef = (a * n / (n - 2)) * (2 * a * n / (n - 2) - 1)
    predicted = s ** k * coef * e * e * u2w
    delta = I2 - I1
    return {"I_gamma1": I1, "I_gamma2": I2, "delta": delta, "predicted": predicted,
            "coefficient": coef, "ratio": delta / predicted, "int_u2w": u2w,
            "nonzero": bool(delta != 0.0), "sign_agrees": bool(np.sign(delta) == np.sign(predicted)),
            "scaling_invariance_gap": abs(I1 - s ** k * I_gamma), "I_gamma": I_gamma}


def _one(n):
    from .tensorfield import Constant
    return Constant(1.0, n)


class _BreakView(MatrixField):
    def __init__(self, A, breaks):
        super().__init__(A.dim, A.ellipticity, A.active, merge_breaks(A.breaks, breaks))
        self.A = A

    def _eval(self, x):
        return self.A.eval(x)


def _with_breaks(A, breaks):
    return _BreakView(A, breaks)
