"""Discrete Dirichlet-to-Neumann maps on the unit cube.

Trilinear hexahedral elements on a uniform ``m^3`` node grid with 2x2x2
Gauss quadrature. The DN matrix is the boundary Schur complement
``B_bb - B_bi B_ii^{-1} B_ib`` of the assembled bilinear form.

Nodes at Chebyshev depth d (distance in grid steps to the boundary) only
couple to depths d - 1, d, d + 1, so the interior block is block
tridiagonal over these shells. The Schur complement is formed by
eliminating shells from the center outward with dense Cholesky factors,
which on one core is much faster than one iterative solve per boundary
node.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .errors import EigenError, EvaluationError, SolverError, SpectrumError
from .tensorfield import (MatrixField, ScalarField, ScaledMatrix, _as_points, identity_matrix,
                          pushforward_conductivity)


@dataclass(frozen=True)
class Mesh:
    """Uniform node grid on ``[0, 1]^3`` with ``m`` nodes per axis."""

    m: int

    def __post_init__(self):
        if self.m < 3:
            raise ValueError("need at least 3 nodes per axis")

    @property
    def h(self):
        return 1.0 / (self.m - 1)

    @property
    def n_nodes(self):
        return self.m ** 3

    def coords(self):
        ax = np.linspace(0.0, 1.0, self.m)
        g = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([v.ravel() for v in g], axis=1)

    def depth(self):
        """Chebyshev distance of every node to the boundary, in grid steps."""
        i = np.arange(self.m)
        d1 = np.minimum(i, self.m - 1 - i)
        return np.minimum(np.minimum(d1[:, None, None], d1[None, :, None]), d1[None, None, :]).ravel()

    def boundary(self):
        return np.flatnonzero(self.depth() == 0)

    def interior(self):
        return np.flatnonzero(self.depth() > 0)

    def elements(self):
        """Connectivity (E, 8) with local node ``4 a0 + 2 a1 + a2``."""
        m = self.m
        e = np.arange(m - 1)
        I, J, K = np.meshgrid(e, e, e, indexing="ij")
        base = (I * m * m + J * m + K).ravel()
        offs = np.array([a0 * m * m + a1 * m + a2 for a0 in (0, 1) for a1 in (0, 1) for a2 in (0, 1)])
        return base[:, None] + offs[None, :]

    def element_origins(self):
        m, h = self.m, self.h
        e = np.arange(m - 1) * h
        g = np.meshgrid(e, e, e, indexing="ij")
        return np.stack([v.ravel() for v in g], axis=1)


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

class CoefficientPair:
    """Flux coefficient, mass weight and shift of one weak form.

    ``kind="conductivity"`` assembles ``K[A] - shift * M[w]`` with w = 1
    unless given; ``kind="metric"`` assembles ``K[A] + M[w]`` (the shift
    is then zero). ``joint`` may supply both coefficients from a single
    evaluation, ``joint.evaluate(points) -> (A, w)``.
    """

    def __init__(self, A: MatrixField | None = None, m_weight: ScalarField | None = None,
                 shift=0.0, kind="conductivity", joint=None, label=""):
        if kind not in ("conductivity", "metric"):
            raise ValueError(f"unknown problem kind {kind!r}")
        if A is None and joint is None:
            raise ValueError("flux coefficient required")
        self.A, self.m_weight, self.shift = A, m_weight, float(shift)
        self.kind, self.joint, self.label = kind, joint, label

    @classmethod
    def conductivity(cls, gamma, lambda0, label=""):
        return cls(gamma, None, lambda0, "conductivity", label=label)

    @classmethod
    def metric(cls, joint, label=""):
        return cls(None, None, 0.0, "metric", joint=joint, label=label)

    @property
    def mass_coef(self):
        return -self.shift if self.kind == "conductivity" else 1.0

    def evaluate(self, x):
        if self.joint is not None:
            A, w = self.joint.evaluate(x)
        else:
            A = self.A.eval(x)
            w = np.ones(len(x)) if self.m_weight is None else self.m_weight.eval(x)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(w))):
            raise EvaluationError("non-finite coefficient at a quadrature point")
        return A, w

    def scaled(self, s):
        """Coefficient pair of ``s A`` with the same shift (conductivity only)."""
        return CoefficientPair(_ScaledA(self.A, s), self.m_weight, self.shift, self.kind,
                               label=f"{s:g}*{self.label}")


class _ScaledA(MatrixField):
    def __init__(self, A, s):
        super().__init__(A.dim, None, A.active, A.breaks)
        self.base, self.s = A, float(s)
        self.constant = A.constant
        if A.constant:
            self.A = self.s * A.A

    def _eval(self, x):
        return self.s * self.base.eval(x)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

_GP = 0.5 + np.array([-0.5, 0.5]) / np.sqrt(3.0)
_XI = np.array([[a, b, c] for a in _GP for b in _GP for c in _GP])  # (8, 3)
_LOCAL = np.array([[a0, a1, a2] for a0 in (0, 1) for a1 in (0, 1) for a2 in (0, 1)])


def _shape_tables():
    """Values (q, a) and reference gradients (q, a, d) of the 8 shape functions."""
    f = np.where(_LOCAL[None, :, :] == 1, _XI[:, None, :], 1.0 - _XI[:, None, :])  # (q, a, d)
    df = np.where(_LOCAL == 1, 1.0, -1.0)[None, :, :]
    N = f.prod(axis=2)
    G = np.empty((8, 8, 3))
    for d in range(3):
        others = [k for k in range(3) if k != d]
        G[:, :, d] = df[:, :, d] * f[:, :, others[0]] * f[:, :, others[1]]
    return N, G


_N, _G = _shape_tables()


@dataclass
class System:
    mesh: Mesh
    K: sp.csr_matrix
    Mw: sp.csr_matrix
    B: sp.csr_matrix
    coeff: CoefficientPair
    seconds: float = 0.0

    def unit_mass(self):
        if self.coeff.kind == "conductivity" and self.coeff.m_weight is None:
            return self.Mw
        return assemble_mass(self.mesh)


def _sparse(mesh, Ke):
    conn = mesh.elements()
    rows = np.repeat(conn, 8, axis=1).ravel()
    cols = np.tile(conn, (1, 8)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_mass(mesh: Mesh, weight=None):
    h = mesh.h
    E = (mesh.m - 1) ** 3
    w = np.ones((E, 8)) if weight is None else weight
    Me = np.einsum("eq,qa,qb->eab", w * (h ** 3 / 8.0), _N, _N)
    return _sparse(mesh, Me)


def assemble(coeff: CoefficientPair, mesh: Mesh, chunk=40000) -> System:
    """Stiffness, weighted mass and ``B = K + mass_coef * Mw`` on the mesh."""
    t0 = time.perf_counter()
    h = mesh.h
    org = mesh.element_origins()
    E = len(org)
    pts = (org[:, None, :] + h * _XI[None, :, :]).reshape(-1, 3)
    A = np.empty((len(pts), 3, 3))
    w = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        A[s:s + chunk], w[s:s + chunk] = coeff.evaluate(pts[s:s + chunk])
    A = A.reshape(E, 8, 3, 3)
    w = w.reshape(E, 8)
    # physical gradients are reference gradients / h; weight h^3/8 per point
    Ke = np.einsum("qai,eqij,qbj->eab", _G, A, _G) * (h / 8.0)
    K = _sparse(mesh, Ke)
    Mw = assemble_mass(mesh, w)
    B = (K + coeff.mass_coef * Mw).tocsr()
    return System(mesh, K, Mw, B, coeff, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# DN matrices
# ---------------------------------------------------------------------------

@dataclass
class DNMatrix:
    entries: np.ndarray
    mesh: Mesh
    fingerprint: str
    boundary: np.ndarray
    seconds: float = 0.0

    def symmetry(self):
        L = self.entries
        return float(np.linalg.norm(L - L.T) / np.linalg.norm(L))

    def export(self, path):
        """Row-major float64 binary plus a JSON sidecar with node coordinates."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(self.entries, dtype="<f8").tofile(path.with_suffix(".bin"))
        side = {"m": self.mesh.m, "fingerprint": self.fingerprint, "dtype": "float64",
                "order": "row-major", "shape": list(self.entries.shape),
                "nodes": self.mesh.coords()[self.boundary].tolist()}
        path.with_suffix(".json").write_text(json.dumps(side))
        return path.with_suffix(".bin"), path.with_suffix(".json")

    @staticmethod
    def load(path):
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        L = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(side["shape"])
        return L, side


def _chol(D):
    try:
        return sla.cho_factor(D, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise SpectrumError("interior block is not positive definite; the shift "
                            "lies at or above the smallest Dirichlet eigenvalue") from None


def schur_shells(B: sp.csr_matrix, mesh: Mesh):
    """Boundary Schur complement by outward shell elimination."""
    depth = mesh.depth()
    shells = [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]
    B = B.tocsr()
    D = B[shells[-1]][:, shells[-1]].toarray()
    for d in range(len(shells) - 2, -1, -1):
        inner, outer = shells[d + 1], shells[d]
        C = B[inner][:, outer].toarray()
        F = _chol(D)
        Y = sla.cho_solve(F, C, check_finite=False)
        D = B[outer][:, outer].toarray() - C.T @ Y
    return D


def schur_dense(B: sp.csr_matrix, mesh: Mesh):
    """Reference Schur complement from one dense factorization (small meshes)."""
    b, i = mesh.boundary(), mesh.interior()
    Bd = B.toarray()
    Bii = Bd[np.ix_(i, i)]
    Bib = Bd[np.ix_(i, b)]
    return Bd[np.ix_(b, b)] - Bib.T @ np.linalg.solve(Bii, Bib)


def dn_matrix(coeff: CoefficientPair, mesh: Mesh, system: System | None = None,
              method="shells") -> DNMatrix:
    """``Lambda_h = B_bb - B_bi B_ii^{-1} B_ib`` indexed by boundary nodes."""
    t0 = time.perf_counter()
    S = system or assemble(coeff, mesh)
    if method == "shells":
        L = schur_shells(S.B, mesh)
    elif method == "dense":
        L = schur_dense(S.B, mesh)
    else:
        raise ValueError(f"unknown method {method!r}")
    return DNMatrix(L, mesh, coeff.label, mesh.boundary(), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# interior solves and spectra
# ---------------------------------------------------------------------------

def solve_interior(B: sp.csr_matrix, rhs, tol=1e-10, x0=None):
    """Conjugate gradients with Jacobi preconditioning to relative residual ``tol``."""
    n = B.shape[0]
    d = B.diagonal()
    if np.any(d <= 0):
        raise SpectrumError("nonpositive diagonal in a system assumed definite")
    P = sp.diags(1.0 / d)
    x, info = spla.cg(B, rhs, x0=x0, rtol=tol, atol=0.0, maxiter=10 * n, M=P)
    res = np.linalg.norm(B @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if info != 0 or res > 10 * tol:
        raise SolverError(f"CG stopped with relative residual {res:.3e} (info={info})")
    return x


def dirichlet_solve(system: System, boundary_values):
    """Nodal solution with prescribed boundary values."""
    mesh = system.mesh
    b, i = mesh.boundary(), mesh.interior()
    B = system.B
    u = np.zeros(mesh.n_nodes)
    u[b] = boundary_values
    rhs = -(B[i][:, b] @ u[b])
    u[i] = solve_interior(B[i][:, i].tocsr(), rhs)
    return u


def spectral_margin(coeff: CoefficientPair, mesh: Mesh, system: System | None = None,
                    iters=20, report=False):
    """``mu_min - shift`` for the pencil (interior K + mass terms, unit mass).

    Inverse iteration with zero shift, started from the constant vector; the
    Rayleigh quotient of the last iterate is returned. For the metric
    problem the potential term is part of the operator and the shift is 0.
    """
    S = system or assemble(coeff, mesh)
    i = mesh.interior()
    Mii = S.unit_mass()[i][:, i].tocsr()
    pure_shift = coeff.kind == "conductivity" and coeff.m_weight is None and coeff.joint is None
    # a pure shift moves every eigenvalue equally; iterating on K keeps the
    # convergence rate mu_1/mu_2 instead of (mu_1 - l)/(mu_2 - l)
    Bii = (S.K if pure_shift else S.B)[i][:, i].tocsr()
    offset = -coeff.shift if pure_shift else 0.0
    x = np.ones(len(i))
    x /= np.sqrt(x @ (Mii @ x))
    hist = []
    for _ in range(iters):
        y = solve_interior(Bii, Mii @ x, tol=1e-12, x0=x / max(hist[-1], 1e-300) if hist else None)
        y /= np.sqrt(y @ (Mii @ y))
        x = y
        hist.append(float(x @ (Bii @ x)))
    if len(hist) > 1 and abs(hist[-1] - hist[-2]) > 1e-6 * abs(hist[-1]):
        raise EigenError(f"inverse iteration stagnated (last change {abs(hist[-1] - hist[-2]):.3e})")
    margin = hist[-1] + offset
    if report:
        return {"margin": margin, "mu_min": margin + (coeff.shift if coeff.kind == "conductivity" else 0.0),
                "history": hist}
    return margin


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

def relative_distance(L1: DNMatrix, L2: DNMatrix):
    return float(np.linalg.norm(L1.entries - L2.entries) / np.linalg.norm(L1.entries))


def pair_coefficients(pair):
    """The two coefficient pairs of a fixed-frequency or fixed-potential pair."""
    if hasattr(pair, "gamma1"):
        return (CoefficientPair.conductivity(pair.gamma1, pair.lambda0, "gamma1"),
                CoefficientPair.conductivity(pair.gamma2, pair.lambda0, "gamma2"))
    c1, c2 = pair.coefficients()
    return CoefficientPair.metric(c1, "g1"), CoefficientPair.metric(c2, "g2")


def _decay_verdict(ds, ratio=1.5):
    rs = [ds[k] / ds[k + 1] if ds[k + 1] > 0 else np.inf for k in range(len(ds) - 1)]
    return rs, bool(len(ds) >= 2 and all(r >= ratio for r in rs))


def dn_compare(pair_or_coeffs, meshes, margins=True, ratio=1.5):
    """Relative Frobenius distance of the two DN matrices per mesh."""
    c1, c2 = (pair_or_coeffs if isinstance(pair_or_coeffs, tuple)
              else pair_coefficients(pair_or_coeffs))
    rows = []
    for m in sorted(meshes):
        mesh = Mesh(m)
        t0 = time.perf_counter()
        S1, S2 = assemble(c1, mesh), assemble(c2, mesh)
        L1, L2 = dn_matrix(c1, mesh, S1), dn_matrix(c2, mesh, S2)
        row = {"m": m, "distance": relative_distance(L1, L2),
               "symmetry": max(L1.symmetry(), L2.symmetry())}
        if margins:
            row["margin_1"] = spectral_margin(c1, mesh, S1)
            row["margin_2"] = spectral_margin(c2, mesh, S2)
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
    ds = [r["distance"] for r in rows]
    rs, ok = _decay_verdict(ds, ratio)
    return {"meshes": rows, "distances": ds, "ratios": rs, "decreasing": ok}


def control_compare(gamma: MatrixField, lambda0, meshes, factor=1.05, floor=1e-3):
    """Negative control: ``(gamma, factor * gamma)`` must not converge to equal maps."""
    c1 = CoefficientPair.conductivity(gamma, lambda0, "gamma")
    c2 = c1.scaled(factor)
    rep = dn_compare((c1, c2), meshes, margins=False)
    ds = rep["distances"]
    stable = all(d > floor for d in ds) and all(r < 1.5 for r in rep["ratios"])
    rep["stabilizes"] = bool(stable)
    return rep


def default_boundary_data(x):
    x = _as_points(x, 3)
    return 1.0 + x[:, 0] + 0.5 * x[:, 1] ** 2 - 0.25 * x[:, 0] * x[:, 2]


def _dual_norm(r, Kii):
    return float(np.sqrt(max(r @ solve_interior(Kii, r, tol=1e-12), 0.0)))


def solution_correspondence(pair, mesh: Mesh, boundary_data=default_boundary_data):
    """Residual of ``w = (c v) o Psi^{-1}`` in the pushed-forward equation.

    v solves the ``c^2 gamma`` problem at ``lambda_eps`` with the given
    boundary data; the nodal interpolant of w is inserted into the
    ``Psi_* gamma`` form at ``lambda_eps`` and the interior residual is
    measured in the discrete dual norm of the unit-coefficient stiffness.
    """
    lam = pair.lambda_eps
    c = pair.c_eps
    gamma = pair.gamma
    cv = CoefficientPair.conductivity(ScaledMatrix(c.power(2) if hasattr(c, "power") else c * c, gamma),
                                      lam, "c2gamma")
    Sv = assemble(cv, mesh)
    X = mesh.coords()
    v = dirichlet_solve(Sv, boundary_data(X[mesh.boundary()]))
    ax = np.linspace(0.0, 1.0, mesh.m)
    interp = RegularGridInterpolator((ax, ax, ax), v.reshape(mesh.m, mesh.m, mesh.m))
    psi = pair.Psi.with_polish(0) if hasattr(pair.Psi, "with_polish") else pair.Psi
    x = psi.inverse(X)
    x = np.clip(x, 0.0, 1.0)
    w = c.eval(x) * interp(x)
    b, i = mesh.boundary(), mesh.interior()
    cw = CoefficientPair.conductivity(pushforward_conductivity(gamma, psi), lam, "psi_gamma")
    Sw = assemble(cw, mesh)
    r = (Sw.B @ w)[i]
    Kid = assemble(CoefficientPair.conductivity(identity_matrix(), 0.0), mesh).K[i][:, i].tocsr()
    scale = np.sqrt(max(w @ (Sw.K @ w), 1e-300))
    return {"m": mesh.m, "residual": _dual_norm(r, Kid), "relative": _dual_norm(r, Kid) / scale,
            "boundary_trace_gap": float(np.max(np.abs(w[b] - boundary_data(X[b]))))}


def scaling_law_check(gamma: MatrixField, lambda0, s, mesh: Mesh):
    """``|| Lambda_{s gamma, lambda0} - s Lambda_{gamma, lambda0/s} ||_F / ||.||_F``."""
    c_lhs = CoefficientPair.conductivity(_ScaledA(gamma, s), lambda0, "lhs")
    c_rhs = CoefficientPair.conductivity(gamma, lambda0 / s, "rhs")
    L1 = dn_matrix(c_lhs, mesh).entries
    L2 = s * dn_matrix(c_rhs, mesh).entries
    return float(np.linalg.norm(L1 - L2) / np.linalg.norm(L1))
