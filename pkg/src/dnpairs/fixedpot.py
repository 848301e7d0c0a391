"""Metric pairs with equal Dirichlet-to-Neumann maps for a fixed potential.

A nonconstant potential V serves as a local coordinate on a submersion box
U. The conformal factor ``c = 1 + eps u`` changes the effective potential
to ``T = V c^{4/(n-2)} + Delta_g c / c`` and the compensating diffeomorphism
solves ``V(Psi(x)) = T(x)`` along the submersion axis. The pair is

    g2 = c^{4/(n-2)} g,   g1 = Psi_* g.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ChartError, ConstantPotentialError, DegenerateFrequencyError
from .fixedfreq import PowerField
from .profiles import Bump1D, SeparableField
from .quadrature import DEFAULT, ORACLE, QuadratureRule
from .tensorfield import (Affine, Box, Diffeo, IdentityDiffeo, MatrixField,
                          ScalarField, ScaledMatrix, UNIT_CUBE, _as_points,
                          conductivity_from_metric, identity_matrix,
                          merge_breaks, pushforward_metric)


@dataclass(frozen=True)
class SubmersionBox:
    U: Box
    axis: int
    min_slope: float
    sign: float = 1.0

    def to_json(self):
        return {"U": self.U.to_json(), "axis": self.axis, "min_slope": self.min_slope}


def _slope_ok(V, box, axis, sign, floor, m=9):
    d = V.grad(box.lattice(m))[:, axis] * sign
    return bool(d.min() >= floor)


def find_submersion_box(V: ScalarField, omega: Box = UNIT_CUBE, margin=0.05, lattice=21,
                        refine=17) -> SubmersionBox:
    """Largest axis-aligned box around the steepest lattice point.

    Faces are pushed outward one lattice step at a time while the sampled
    ``|d_k V|`` stays at least half its value at the center.
    """
    inner = Box(np.asarray(omega.lo) + margin, np.asarray(omega.hi) - margin)
    X = inner.lattice(lattice)
    G = np.abs(V.grad(X))
    if G.max() < 1e-8:
        raise ConstantPotentialError("potential has no sampled gradient above 1e-8")
    p, k = np.unravel_index(int(np.argmax(G)), G.shape)
    x0 = X[p]
    s0 = float(V.grad(x0)[0, k])
    sign = float(np.sign(s0))
    floor = 0.5 * abs(s0)
    step = inner.widths / (lattice - 1)
    lo, hi = np.maximum(x0 - step, inner.lo), np.minimum(x0 + step, inner.hi)
    if not _slope_ok(V, Box(lo, hi), k, sign, floor):
        raise ConstantPotentialError("no submersion neighbourhood at the steepest point")
    frozen = np.zeros((2, V.dim), dtype=bool)
    while not frozen.all():
        for side in (0, 1):
            for i in range(V.dim):
                if frozen[side, i]:
                    continue
                nlo, nhi = lo.copy(), hi.copy()
                if side == 0:
                    nlo[i] = max(lo[i] - step[i], inner.lo[i])
                    moved = nlo[i] < lo[i]
                else:
                    nhi[i] = min(hi[i] + step[i], inner.hi[i])
                    moved = nhi[i] > hi[i]
                if moved and _slope_ok(V, Box(nlo, nhi), k, sign, floor):
                    lo, hi = nlo, nhi
                else:
                    frozen[side, i] = True
    U = Box(lo, hi)
    slope = float(np.min(np.abs(V.grad(U.lattice(refine))[:, k])))
    return SubmersionBox(U, int(k), slope, sign)


# ---------------------------------------------------------------------------
# effective potential
# ---------------------------------------------------------------------------

def laplace_beltrami(g: MatrixField, c: ScalarField, x):
    """``Delta_g c`` in divergence form with analytic derivatives of c.

    ``|g|^{-1/2} d_i(gamma_g^{ij} d_j c)`` is expanded as
    ``tr(gamma_g Hc) + div(gamma_g) . grad c``; the row divergence of the
    coefficient uses centered differences (step 1e-6) and vanishes for
    constant metrics.
    """
    x = _as_points(x, g.dim)
    G = g.eval(x)
    sq = np.sqrt(np.linalg.det(G))
    gg = sq[:, None, None] * np.linalg.inv(G)
    out = np.einsum("nij,nij->n", gg, c.hess(x))
    if not g.constant:
        out += np.einsum("ni,ni->n", conductivity_from_metric(g).divergence(x, 1e-6), c.grad(x))
    return out / sq


class EffectivePotential(ScalarField):
    """``T = V c^{4/(n-2)} + Delta_g c / c``; equals V off the support of c - 1."""

    def __init__(self, g: MatrixField, V: ScalarField, c: ScalarField):
        super().__init__(V.dim, None, 0.0, merge_breaks(V.breaks, c.breaks) if V.breaks else c.breaks)
        self.g, self.V, self.c = g, V, c
        self.power = 4.0 / (V.dim - 2)

    def _eval(self, x):
        out = self.V.eval(x)
        if self.c.support is None:
            m = np.ones(len(x), dtype=bool)
        else:
            m = self.c.support.inside(x, closed=False)
        if m.any():
            xm = x[m]
            c = self.c.eval(xm)
            out[m] = out[m] * c ** self.power + laplace_beltrami(self.g, self.c, xm) / c
        return out


def effective_potential(g, V, c) -> EffectivePotential:
    return EffectivePotential(g, V, c)


def effective_potential_perturbation(T: ScalarField, V: ScalarField, pts) -> float:
    """``sup |T - V|`` over the given points."""
    return float(np.max(np.abs(T.eval(pts) - V.eval(pts))))


# ---------------------------------------------------------------------------
# compensating diffeomorphism
# ---------------------------------------------------------------------------

class CompensatingDiffeo(Diffeo):
    """``Psi(x) = F^{-1}(T(x), x')`` with ``F(x) = (V(x), x')`` along the submersion axis.

    For affine V the chart inversion is closed form; otherwise a safeguarded
    1D Newton iteration (30 steps, tolerance 1e-12) runs inside the range of
    V over U. The Jacobian is a centered difference of the forward map.
    """

    iters = 30
    tol = 1e-12
    fd_step = 1e-6

    def __init__(self, V: ScalarField, T: ScalarField, sb: SubmersionBox):
        super().__init__(V.dim, sb.U)
        self.V, self.T, self.sb = V, T, sb
        self.breaks = T.breaks

    def _solve_axis(self, x, target):
        k = self.sb.axis
        V = self.V
        if isinstance(V, Affine):
            rest = x @ V.a - x[:, k] * V.a[k] + V.b
            return (target - rest) / V.a[k]
        lo = np.full(len(x), self.sb.U.lo[k])
        hi = np.full(len(x), self.sb.U.hi[k])

        def Vk(t):
            z = x.copy()
            z[:, k] = t
            return V.eval(z) - target, V.grad(z)[:, k]

        flo, _ = Vk(lo)
        fhi, _ = Vk(hi)
        if np.any(flo * fhi > 0):
            bad = int(np.argmax(flo * fhi > 0))
            raise ChartError(f"target {target[bad]:.6g} outside the V-range of U at {x[bad].tolist()}")
        y = x[:, k].copy()
        for _ in range(self.iters):
            f, d = Vk(y)
            # keep the bracket so Newton can fall back to bisection
            up = np.sign(f) == np.sign(fhi)
            hi = np.where(up, y, hi)
            lo = np.where(up, lo, y)
            step = f / d
            new = y - step
            out = (new <= np.minimum(lo, hi)) | (new >= np.maximum(lo, hi))
            new = np.where(out, 0.5 * (lo + hi), new)
            done = np.abs(new - y) <= self.tol
            y = new
            if done.all():
                return y
        f, _ = Vk(y)
        if np.max(np.abs(f)) > 1e-10:
            raise ChartError(f"chart Newton did not converge (residual {np.max(np.abs(f)):.3e})")
        return y

    def _forward(self, x):
        out = x.copy()
        out[:, self.sb.axis] = self._solve_axis(x, self.T.eval(x))
        return out

    def _jac(self, x):
        # rows other than the submersion axis are the identity
        k = self.sb.axis
        h = self.fd_step
        J = np.broadcast_to(np.eye(self.dim), (len(x), self.dim, self.dim)).copy()
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = h
            J[:, k, j] = (self._forward(x + e)[:, k] - self._forward(x - e)[:, k]) / (2 * h)
        return J


def compensating_diffeo(V, T, sb) -> Diffeo:
    return CompensatingDiffeo(V, T, sb)


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PotConfig:
    Q0: Box = Box.cube(0.1, 0.9)
    sigma: float = 1.5
    amplitude: float = 5e-3  # sup of u; keeps d_k Psi_k well away from zero
    margin: float = 0.05
    lattice: int = 21
    check_points: int = 10
    quad: QuadratureRule = DEFAULT
    allow_degenerate: bool = False


def default_potential(dim=3) -> Affine:
    a = np.zeros(dim)
    a[0] = 1.0
    return Affine(a, 1.0)


def bump_function(cfg: PotConfig, dim=3) -> SeparableField:
    """Nonnegative product bump on Q0 with sup equal to ``cfg.amplitude``."""
    ps = []
    for j in range(dim):
        b = Bump1D(cfg.Q0.lo[j], cfg.Q0.hi[j], cfg.sigma)
        ps.append(b.scaled(1.0 / b.midpoint_value()))
    return SeparableField([(cfg.amplitude, tuple(ps))])


class _Weight(ScalarField):
    def __init__(self, V, g):
        super().__init__(V.dim)
        self.V, self.g = V, g

    def _eval(self, x):
        return self.V.eval(x) * np.sqrt(np.linalg.det(self.g.eval(x)))


class PushedMetricCoefficients:
    """Flux coefficient and mass weight of ``(Psi_* g, V)`` from one inversion.

    At ``y = Psi(x)``: ``gamma_{g1} = DPsi gamma_g DPsi^T / det DPsi`` and
    ``|g1|^{1/2} V = |g|^{1/2}(x) V(y) / det DPsi``.
    """

    def __init__(self, g, V, psi):
        self.g, self.V, self.psi = g, V, psi
        self.dim = g.dim

    def evaluate(self, y):
        y = _as_points(y, self.dim)
        x, D = self.psi.inverse_and_jac(y)
        det = np.linalg.det(D)
        G = self.g.eval(x)
        sq = np.sqrt(np.linalg.det(G))
        gg = sq[:, None, None] * np.linalg.inv(G)
        A = D @ gg @ D.transpose(0, 2, 1) / det[:, None, None]
        return A, self.V.eval(y) * sq / det


class PlainMetricCoefficients:
    """Flux coefficient ``gamma_g`` and weight ``V |g|^{1/2}`` of a metric."""

    def __init__(self, g, V):
        self.g, self.V = g, V
        self.dim = g.dim

    def evaluate(self, y):
        y = _as_points(y, self.dim)
        G = self.g.eval(y)
        sq = np.sqrt(np.linalg.det(G))
        return sq[:, None, None] * np.linalg.inv(G), self.V.eval(y) * sq


@dataclass
class PotPair:
    g1: MatrixField
    g2: MatrixField
    V: ScalarField
    c_eps: ScalarField
    T_eps: ScalarField
    Psi: Diffeo
    eps: float
    g: MatrixField
    u: ScalarField
    submersion: SubmersionBox | None
    certificates: dict = field(default_factory=dict)
    Q0: Box | None = None

    def coefficients(self):
        """(coefficients of g1, coefficients of g2) for the DN assembly."""
        c1 = (PlainMetricCoefficients(self.g, self.V) if isinstance(self.Psi, IdentityDiffeo)
              else PushedMetricCoefficients(self.g, self.V, self.Psi))
        return c1, PlainMetricCoefficients(self.g2, self.V)

    def to_json(self):
        return {"eps": self.eps,
                "submersion": None if self.submersion is None else self.submersion.to_json(),
                "certificates": self.certificates}

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


def build_pair_fp(g: MatrixField | None = None, V: ScalarField | None = None, eps=0.05,
                  config: PotConfig | None = None) -> PotPair:
    """Assemble the fixed-potential pair for one eps."""
    cfg = config or PotConfig()
    g = g or identity_matrix()
    V = V or default_potential(g.dim)
    n = g.dim
    sb = find_submersion_box(V, UNIT_CUBE, cfg.margin, cfg.lattice)
    if not sb.U.contains(cfg.Q0, margin=1e-9):
        raise ChartError("bump box Q0 is not compactly inside the submersion box")
    u = bump_function(cfg, n)
    if eps == 0:
        if not cfg.allow_degenerate:
            raise DegenerateFrequencyError("eps = 0 gives a degenerate pair")
        c = PowerField(u, 0.0, 1.0)
        return PotPair(g, g, V, c, V, IdentityDiffeo(n), 0.0, g, u, sb,
                       {"degenerate": True}, cfg.Q0)
    c = PowerField(u, eps, 1.0)
    T = effective_potential(g, V, c)
    psi = compensating_diffeo(V, T, sb)
    g2 = ScaledMatrix(c.power(4.0 / (n - 2)), g)
    g1 = pushforward_metric(g, psi)
    pair = PotPair(g1, g2, V, c, T, psi, float(eps), g, u, sb, {}, cfg.Q0)
    pts = cfg.Q0.lattice(cfg.check_points)
    y = psi.forward(pts)
    det = np.linalg.det(psi.jac(pts))
    if det.min() <= 0:
        raise ChartError(f"compensating map folds (min det {det.min():.3e}); lower eps or amplitude")
    pair.certificates.update({
        "compatibility_residual": float(np.max(np.abs(V.eval(y) - T.eval(pts)))),
        "perturbation": effective_potential_perturbation(T, V, pts),
        "min_det": float(det.min()),
    })
    return pair


def volume_certificate(pair: PotPair, quad: QuadratureRule | None = None,
                       omega: Box = UNIT_CUBE, oracle: QuadratureRule = ORACLE,
                       panels=8, panel_nodes=10):
    """Riemannian volumes of g, g1 and g2 and the independent surplus check.

    ``Vol(g1)`` is integrated in y over Q0 (where Psi differs from the
    identity) plus ``Vol(g)`` of the complement. The y-integrand composes
    the bump with the inverse map, so Q0 is split into ``panels`` equal
    panels per axis instead of a single high-order panel.
    """
    quad = quad or DEFAULT
    n = pair.g.dim
    br = pair.c_eps.breaks
    sq = lambda G: np.sqrt(np.linalg.det(G))
    vol = quad.integrate(lambda x: sq(pair.g.eval(x)), omega, br)
    vol2 = quad.integrate(lambda x: sq(pair.g2.eval(x)), omega, br)
    Q0 = pair.Q0
    pbr = tuple(tuple(np.linspace(Q0.lo[i], Q0.hi[i], panels + 1)) for i in range(n))
    inside_g1 = QuadratureRule(panel_nodes).integrate(lambda x: sq(pair.g1.eval(x)), Q0, pbr)
    inside_g = QuadratureRule(panel_nodes).integrate(lambda x: sq(pair.g.eval(x)), Q0, pbr)
    vol1 = vol - inside_g + inside_g1
    k = 2.0 * n / (n - 2)
    # independent: the surplus integrand written directly, other rule
    surplus = oracle.integrate(
        lambda x: ((1.0 + pair.eps * pair.u.eval(x)) ** k - 1.0) * sq(pair.g.eval(x)), Q0, br)
    first_order = k * pair.eps * oracle.integrate(lambda x: pair.u.eval(x) * sq(pair.g.eval(x)), Q0, br)
    return {"vol_g": vol, "vol_g1": vol1, "vol_g2": vol2,
            "vol_gap_g1": abs(vol1 - vol), "surplus": vol2 - vol,
            "surplus_oracle": surplus, "surplus_mismatch": abs(vol2 - vol - surplus),
            "first_order": first_order, "positive": bool(vol2 - vol > 0)}
