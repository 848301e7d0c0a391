"""Coordinate fields on boxes and the metric/conductivity dictionary.

Fields are immutable point evaluators acting on ``(N, n)`` arrays. Scalar
fields expose ``eval``, ``grad`` and ``hess``; matrix fields expose ``eval``
returning ``(N, n, n)`` stacks. Diffeomorphisms expose ``forward``, ``jac``
and a Newton ``inverse``.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import (DegenerateCoefficientError, EvaluationError,
                     InversionError, UnsupportedDimensionError)
from .quadrature import DEFAULT, QuadratureRule


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``prod [lo_i, hi_i]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi):
            raise ValueError("lo and hi differ in length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"empty box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, a, b, n=3):
        return cls((a,) * n, (b,) * n)

    @property
    def dim(self):
        return len(self.lo)

    @property
    def widths(self):
        return np.subtract(self.hi, self.lo)

    @property
    def volume(self):
        return float(np.prod(self.widths))

    @property
    def center(self):
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    def interval(self, i):
        return Box((self.lo[i],), (self.hi[i],))

    def drop_first(self):
        return Box(self.lo[1:], self.hi[1:])

    def contains(self, other: "Box", margin=0.0):
        """True when ``other`` sits inside self with at least ``margin`` clearance."""
        return all(a + margin <= c and d <= b - margin
                   for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def inside(self, x, closed=True):
        x = np.asarray(x)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if closed:
            return np.all((x >= lo) & (x <= hi), axis=-1)
        return np.all((x > lo) & (x < hi), axis=-1)

    def hull(self, other: "Box"):
        return Box(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def sample(self, n, rng):
        return np.asarray(self.lo) + rng.random((n, self.dim)) * self.widths

    def lattice(self, m):
        axes = [np.linspace(a, b, m) for a, b in zip(self.lo, self.hi)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([v.ravel() for v in g], axis=1)

    def to_json(self):
        return {"lo": list(self.lo), "hi": list(self.hi)}


UNIT_CUBE = Box.cube(0.0, 1.0)


def merge_breaks(*lists):
    """Union of per-axis breakpoint lists (``None`` entries are skipped)."""
    lists = [b for b in lists if b is not None]
    if not lists:
        return None
    n = len(lists[0])
    return tuple(tuple(sorted(set().union(*[set(b[i]) for b in lists]))) for i in range(n))


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# scalar fields
# ---------------------------------------------------------------------------

class ScalarField:
    """Scalar point evaluator with optional compact support.

    Subclasses implement ``_eval``, ``_grad`` and ``_hess`` on points inside
    the support; this base class returns ``background`` (and zero
    derivatives) outside it, as exact constants.

    Parameters
    ----------
    dim : int
    support : Box or None
        Closed box outside which the field equals ``background``.
    background : float
    breaks : tuple of tuples or None
        Per-axis coordinates where the field changes character (support
        edges of its ingredients). Used to place quadrature panels.
    fd_step : float or None
        When set, derivatives are centered differences with this step
        instead of the analytic ones.
    """

    def __init__(self, dim, support=None, background=0.0, breaks=None, fd_step=None):
        self.dim = int(dim)
        self.support = support
        self.background = float(background)
        if breaks is None and support is not None:
            breaks = tuple((support.lo[i], support.hi[i]) for i in range(self.dim))
        self.breaks = breaks
        self.fd_step = fd_step

    # -- to be provided by subclasses -------------------------------------
    def _eval(self, x):
        raise NotImplementedError

    def _grad(self, x):
        return _fd_grad(self._eval, x, 1e-5)

    def _hess(self, x):
        return _fd_hess(self._grad, x, 1e-5)

    def _lap(self, x):
        return np.trace(self._hess(x), axis1=1, axis2=2)

    # -- public API --------------------------------------------------------
    @property
    def derivative_mode(self):
        return "analytic" if self.fd_step is None else f"centered-difference({self.fd_step:g})"

    def _mask(self, x):
        if self.support is None:
            return None
        return self.support.inside(x, closed=False)

    def _dispatch(self, x, fn, shape_tail, fill):
        x = _as_points(x, self.dim)
        m = self._mask(x)
        if m is None:
            out = fn(x)
        else:
            out = np.full((len(x),) + shape_tail, fill, dtype=float)
            if m.any():
                out[m] = fn(x[m])
        if not np.all(np.isfinite(out)):
            raise EvaluationError("non-finite field value")
        return out

    def eval(self, x):
        return self._dispatch(x, self._eval, (), self.background)

    __call__ = eval

    def grad(self, x):
        if self.fd_step is not None:
            return _fd_grad(self.eval, _as_points(x, self.dim), self.fd_step)
        return self._dispatch(x, self._grad, (self.dim,), 0.0)

    def hess(self, x):
        if self.fd_step is not None:
            return _fd_hess(self.grad, _as_points(x, self.dim), self.fd_step)
        return self._dispatch(x, self._hess, (self.dim, self.dim), 0.0)

    def lap(self, x):
        if self.fd_step is not None:
            return np.trace(self.hess(x), axis1=1, axis2=2)
        return self._dispatch(x, self._lap, (), 0.0)

    def partial(self, alpha, x):
        """Exact mixed partial ``d^alpha``; only some fields implement it."""
        raise NotImplementedError

    def has_partials(self):
        return False

    def with_fd(self, step):
        """Copy of this field whose derivatives are centered differences."""
        return _FDView(self, step)

    # arithmetic --------------------------------------------------------
    def __add__(self, other):
        if np.isscalar(other):
            return LinearCombination([self], [1.0], shift=float(other))
        return LinearCombination([self, other], [1.0, 1.0])

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return LinearCombination([self], [1.0], shift=-float(other))
        return LinearCombination([self, other], [1.0, -1.0])

    def __neg__(self):
        return LinearCombination([self], [-1.0])

    def __mul__(self, other):
        if np.isscalar(other):
            return LinearCombination([self], [float(other)])
        return Product(self, other)

    __rmul__ = __mul__


class _FDView(ScalarField):
    def __init__(self, base, step):
        super().__init__(base.dim, base.support, base.background, base.breaks, fd_step=step)
        self.base = base

    def _eval(self, x):
        return self.base._eval(x)


def _fd_grad(f, x, h):
    n = x.shape[1]
    out = np.empty(x.shape)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        out[:, i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def _fd_hess(g, x, h):
    n = x.shape[1]
    out = np.empty((len(x), n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        out[:, :, i] = (g(x + e) - g(x - e)) / (2 * h)
    return 0.5 * (out + out.transpose(0, 2, 1))


class FunctionField(ScalarField):
    """Scalar field from plain callables; missing derivatives fall back to differences."""

    def __init__(self, dim, f, grad=None, hess=None, support=None, background=0.0,
                 breaks=None, fd_step=None):
        super().__init__(dim, support, background, breaks, fd_step)
        self._f, self._g, self._h = f, grad, hess

    def _eval(self, x):
        return np.asarray(self._f(x), dtype=float)

    def _grad(self, x):
        if self._g is None:
            return _fd_grad(self._f, x, 1e-5)
        return self._g(x)

    def _hess(self, x):
        if self._h is None:
            return _fd_hess(self._grad, x, 1e-5)
        return self._h(x)


class Constant(ScalarField):
    def __init__(self, value, dim=3):
        super().__init__(dim)
        self.value = float(value)

    def _eval(self, x):
        return np.full(len(x), self.value)

    def _grad(self, x):
        return np.zeros(x.shape)

    def _hess(self, x):
        return np.zeros((len(x), self.dim, self.dim))

    def _lap(self, x):
        return np.zeros(len(x))

    def has_partials(self):
        return True

    def partial(self, alpha, x):
        x = _as_points(x, self.dim)
        return self._eval(x) if sum(alpha) == 0 else np.zeros(len(x))


class Affine(ScalarField):
    """``a . x + b``."""

    def __init__(self, a, b=0.0):
        a = np.asarray(a, dtype=float)
        super().__init__(len(a))
        self.a, self.b = a, float(b)

    def _eval(self, x):
        return x @ self.a + self.b

    def _grad(self, x):
        return np.broadcast_to(self.a, x.shape).copy()

    def _hess(self, x):
        return np.zeros((len(x), self.dim, self.dim))

    def _lap(self, x):
        return np.zeros(len(x))

    def has_partials(self):
        return True

    def partial(self, alpha, x):
        x = _as_points(x, self.dim)
        k = sum(alpha)
        if k == 0:
            return self._eval(x)
        if k == 1:
            return np.full(len(x), self.a[int(np.argmax(alpha))])
        return np.zeros(len(x))


def coordinate(i, dim=3):
    a = np.zeros(dim)
    a[i] = 1.0
    return Affine(a)


def _union_support(fields):
    sups = [f.support for f in fields]
    if any(s is None for s in sups):
        return None
    out = sups[0]
    for s in sups[1:]:
        out = out.hull(s)
    return out


class LinearCombination(ScalarField):
    def __init__(self, fields, coefs, shift=0.0):
        self.fields = list(fields)
        self.coefs = [float(c) for c in coefs]
        self.shift = float(shift)
        bg = self.shift + sum(c * f.background for c, f in zip(self.coefs, self.fields))
        sup = _union_support(self.fields)
        super().__init__(self.fields[0].dim, sup, bg,
                         merge_breaks(*[f.breaks for f in self.fields]))

    def _eval(self, x):
        return self.shift + sum(c * f.eval(x) for c, f in zip(self.coefs, self.fields))

    def _grad(self, x):
        return sum(c * f.grad(x) for c, f in zip(self.coefs, self.fields))

    def _hess(self, x):
        return sum(c * f.hess(x) for c, f in zip(self.coefs, self.fields))

    def _lap(self, x):
        return sum(c * f.lap(x) for c, f in zip(self.coefs, self.fields))

    def has_partials(self):
        return all(f.has_partials() for f in self.fields)

    def partial(self, alpha, x):
        out = sum(c * f.partial(alpha, x) for c, f in zip(self.coefs, self.fields))
        if sum(alpha) == 0:
            out = out + self.shift
        return out


class Product(ScalarField):
    def __init__(self, a, b):
        self.a, self.b = a, b
        sup = None
        if a.support is not None and a.background == 0.0:
            sup = a.support
        if b.support is not None and b.background == 0.0:
            sup = b.support if sup is None else _intersect(sup, b.support)
        super().__init__(a.dim, sup, a.background * b.background if sup is None else 0.0,
                         merge_breaks(a.breaks, b.breaks))

    def _eval(self, x):
        return self.a.eval(x) * self.b.eval(x)

    def _grad(self, x):
        return self.a.grad(x) * self.b.eval(x)[:, None] + self.b.grad(x) * self.a.eval(x)[:, None]

    def _hess(self, x):
        fa, fb = self.a.eval(x), self.b.eval(x)
        ga, gb = self.a.grad(x), self.b.grad(x)
        cross = ga[:, :, None] * gb[:, None, :]
        return (self.a.hess(x) * fb[:, None, None] + self.b.hess(x) * fa[:, None, None]
                + cross + cross.transpose(0, 2, 1))

    def has_partials(self):
        return self.a.has_partials() and self.b.has_partials()

    def partial(self, alpha, x):
        # Leibniz rule over all sub-multi-indices
        out = 0.0
        for beta in np.ndindex(*[a + 1 for a in alpha]):
            rest = tuple(a - b for a, b in zip(alpha, beta))
            w = np.prod([comb(a, b) for a, b in zip(alpha, beta)])
            out = out + w * self.a.partial(beta, x) * self.b.partial(rest, x)
        return out


def _intersect(a, b):
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    if np.any(lo >= hi):
        return Box(lo, lo + 1e-300)
    return Box(lo, hi)


class Composition(ScalarField):
    """``phi(a(x))`` for a univariate ``phi`` returning (value, d1, d2).

    The support of ``a`` is kept with background ``phi(a.background)``.
    """

    def __init__(self, phi, a):
        self.phi, self.a = phi, a
        bg = float(phi(np.array([a.background]))[0][0])
        super().__init__(a.dim, a.support, bg, a.breaks)

    def _eval(self, x):
        return self.phi(self.a.eval(x))[0]

    def _grad(self, x):
        _, d1, _ = self.phi(self.a.eval(x))
        return d1[:, None] * self.a.grad(x)

    def _hess(self, x):
        _, d1, d2 = self.phi(self.a.eval(x))
        g = self.a.grad(x)
        return d1[:, None, None] * self.a.hess(x) + d2[:, None, None] * g[:, :, None] * g[:, None, :]

    def _lap(self, x):
        _, d1, d2 = self.phi(self.a.eval(x))
        g = self.a.grad(x)
        return d1 * self.a.lap(x) + d2 * np.einsum("ij,ij->i", g, g)


# ---------------------------------------------------------------------------
# matrix fields
# ---------------------------------------------------------------------------

class MatrixField:
    """Symmetric-matrix point evaluator.

    Parameters
    ----------
    dim : int
    ellipticity : (float, float) or None
        Claimed bounds ``m Id <= A(x) <= M Id``.
    active : Box or None
        Box outside which the field equals its value at infinity (used to
        place quadrature panels); ``None`` means "anywhere".
    breaks : per-axis breakpoints, optional
    """

    constant = False

    def __init__(self, dim, ellipticity=None, active=None, breaks=None):
        self.dim = int(dim)
        self.ellipticity = ellipticity
        self.active = active
        if breaks is None and active is not None:
            breaks = tuple((active.lo[i], active.hi[i]) for i in range(self.dim))
        self.breaks = breaks

    def _eval(self, x):
        raise NotImplementedError

    def eval(self, x):
        x = _as_points(x, self.dim)
        out = self._eval(x)
        if not np.all(np.isfinite(out)):
            raise EvaluationError("non-finite matrix value")
        return out

    __call__ = eval

    def divergence(self, x, step=1e-6):
        """Row divergence ``sum_i d_i A_ij`` by centered differences."""
        x = _as_points(x, self.dim)
        if self.constant:
            return np.zeros(x.shape)
        out = np.zeros(x.shape)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = step
            out += (self.eval(x + e)[:, i, :] - self.eval(x - e)[:, i, :]) / (2 * step)
        return out

    def check_ellipticity(self, pts):
        """Sampled (min, max) eigenvalue and whether they sit inside the claim."""
        ev = np.linalg.eigvalsh(self.eval(pts))
        lo, hi = float(ev.min()), float(ev.max())
        ok = True
        if self.ellipticity is not None:
            ok = self.ellipticity[0] <= lo and hi <= self.ellipticity[1]
        return {"min_eig": lo, "max_eig": hi, "ok": bool(ok)}


class ConstantMatrix(MatrixField):
    constant = True

    def __init__(self, A):
        A = np.asarray(A, dtype=float)
        ev = np.linalg.eigvalsh(A)
        super().__init__(A.shape[0], (float(ev.min()), float(ev.max())))
        self.A = A

    def _eval(self, x):
        return np.broadcast_to(self.A, (len(x),) + self.A.shape).copy()


def identity_matrix(dim=3):
    return ConstantMatrix(np.eye(dim))


class FunctionMatrix(MatrixField):
    def __init__(self, dim, fn, ellipticity=None, active=None, breaks=None):
        super().__init__(dim, ellipticity, active, breaks)
        self.fn = fn

    def _eval(self, x):
        return self.fn(x)


class ScaledMatrix(MatrixField):
    """``s(x) * A(x)`` for a scalar field ``s`` and matrix field ``A``."""

    def __init__(self, s, A, const=1.0):
        active = s.support if s.support is not None else None
        if not A.constant:
            active = None
        super().__init__(A.dim, None, active, merge_breaks(s.breaks, A.breaks))
        self.s, self.A, self.const = s, A, float(const)

    def _eval(self, x):
        return self.const * self.s.eval(x)[:, None, None] * self.A.eval(x)


def _check_spd(G, x):
    try:
        np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        ev = np.linalg.eigvalsh(G)
        bad = int(np.argmin(ev.min(axis=1)))
        raise DegenerateCoefficientError(
            f"matrix not positive definite at {x[bad].tolist()}") from None


def conductivity_from_metric(g: MatrixField) -> MatrixField:
    """``gamma_g = det(g)^{1/2} g^{-1}`` pointwise."""

    def fn(x):
        G = g.eval(x)
        _check_spd(G, x)
        return np.sqrt(np.linalg.det(G))[:, None, None] * np.linalg.inv(G)

    return FunctionMatrix(g.dim, fn, active=g.active, breaks=g.breaks)


def metric_from_conductivity(gamma: MatrixField) -> MatrixField:
    """``g_gamma = det(gamma)^{1/(n-2)} gamma^{-1}`` (lower indices)."""
    n = gamma.dim
    if n <= 2:
        raise UnsupportedDimensionError("conformal exponents are singular for n <= 2")

    def fn(x):
        A = gamma.eval(x)
        _check_spd(A, x)
        return np.linalg.det(A)[:, None, None] ** (1.0 / (n - 2)) * np.linalg.inv(A)

    return FunctionMatrix(n, fn, active=gamma.active, breaks=gamma.breaks)


def volume_density(gamma: MatrixField) -> ScalarField:
    """``w = det(gamma)^{1/(n-2)}``, the Riemannian density of ``g_gamma``."""
    n = gamma.dim
    if n <= 2:
        raise UnsupportedDimensionError("conformal exponents are singular for n <= 2")

    def f(x):
        return np.linalg.det(gamma.eval(x)) ** (1.0 / (n - 2))

    if gamma.constant:
        w = float(np.linalg.det(gamma.A) ** (1.0 / (n - 2)))
        return Constant(w, n)
    return FunctionField(n, f, breaks=gamma.breaks)


def _integration_breaks(field, box):
    br = field.breaks
    return br


def det_invariant(gamma: MatrixField, omega: Box = UNIT_CUBE, quad: QuadratureRule = DEFAULT):
    """Quadrature of ``det(gamma)^{1/(n-2)}`` over ``omega``."""
    n = gamma.dim
    if n <= 2:
        raise UnsupportedDimensionError("conformal exponents are singular for n <= 2")
    return quad.integrate(lambda x: np.linalg.det(gamma.eval(x)) ** (1.0 / (n - 2)),
                          omega, _integration_breaks(gamma, omega))


def riemannian_volume(g: MatrixField, omega: Box = UNIT_CUBE, quad: QuadratureRule = DEFAULT):
    """Quadrature of ``det(g)^{1/2}`` over ``omega``."""
    return quad.integrate(lambda x: np.sqrt(np.linalg.det(g.eval(x))), omega,
                          _integration_breaks(g, omega))


# ---------------------------------------------------------------------------
# diffeomorphisms
# ---------------------------------------------------------------------------

class Diffeo:
    """Orientation-preserving diffeomorphism equal to the identity off ``support``.

    Subclasses implement ``_forward`` and ``_jac`` on points inside the
    support. ``inverse`` is a Newton iteration started at the target.
    """

    newton_iters = 20
    newton_tol = 1e-13

    def __init__(self, dim, support=None):
        self.dim = int(dim)
        self.support = support

    def _forward(self, x):
        raise NotImplementedError

    def _jac(self, x):
        return _fd_jac(self._forward, x, 1e-6)

    def _forward_and_jac(self, x):
        return self._forward(x), self._jac(x)

    def _inside(self, x):
        if self.support is None:
            return np.ones(len(x), dtype=bool)
        return self.support.inside(x, closed=False)

    def forward(self, x):
        x = _as_points(x, self.dim)
        out = x.copy()
        m = self._inside(x)
        if m.any():
            out[m] = self._forward(x[m])
        return out

    __call__ = forward

    def jac(self, x):
        x = _as_points(x, self.dim)
        out = np.broadcast_to(np.eye(self.dim), (len(x), self.dim, self.dim)).copy()
        m = self._inside(x)
        if m.any():
            out[m] = self._jac(x[m])
        return out

    def _initial_inverse(self, y):
        return y.copy()

    def inverse_and_jac(self, y):
        """Return ``x = Psi^{-1}(y)`` and ``DPsi(x)``."""
        y = _as_points(y, self.dim)
        x = y.copy()
        J = np.broadcast_to(np.eye(self.dim), (len(y), self.dim, self.dim)).copy()
        m = self._inside(y)
        if m.any():
            x[m], J[m] = self._newton(y[m])
        return x, J

    def inverse(self, y):
        return self.inverse_and_jac(y)[0]

    def _newton(self, y):
        x = self._initial_inverse(y)
        J = np.empty((len(y), self.dim, self.dim))
        active = np.arange(len(y))
        for _ in range(self.newton_iters):
            F, Ja = self._forward_and_jac(x[active])
            J[active] = Ja
            r = y[active] - F
            dx = np.linalg.solve(Ja, r[:, :, None])[:, :, 0]
            # damped fallback where the full step increases the residual
            rn = np.linalg.norm(r, axis=1)
            step = np.ones(len(active))
            trial = x[active] + dx
            bad = np.zeros(len(active), dtype=bool)
            if self.support is not None:
                bad = ~self.support.inside(trial, closed=True)
            for _k in range(6):
                if not bad.any():
                    break
                step[bad] *= 0.5
                trial = x[active] + step[:, None] * dx
                bad = ~self.support.inside(trial, closed=True) if self.support is not None else bad & False
            x[active] = trial
            done = (np.max(np.abs(step[:, None] * dx), axis=1) <= self.newton_tol) | (rn == 0.0)
            active = active[~done]
            if active.size == 0:
                return x, J
        F = self._forward(x[active])
        res = np.max(np.abs(F - y[active]), axis=1)
        worst = int(np.argmax(res))
        if res[worst] > 1e-10:
            raise InversionError(f"Newton inversion failed (residual {res[worst]:.3e})",
                                 point=y[active][worst].tolist())
        J[active] = self._jac(x[active])
        return x, J


def _fd_jac(f, x, h):
    n = x.shape[1]
    out = np.empty((len(x), n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        out[:, :, j] = (f(x + e) - f(x - e)) / (2 * h)
    return out


class IdentityDiffeo(Diffeo):
    def __init__(self, dim=3):
        super().__init__(dim, None)

    def forward(self, x):
        return _as_points(x, self.dim).copy()

    def jac(self, x):
        x = _as_points(x, self.dim)
        return np.broadcast_to(np.eye(self.dim), (len(x), self.dim, self.dim)).copy()

    def inverse_and_jac(self, y):
        return self.forward(y), self.jac(y)


class AffineDiffeo(Diffeo):
    """``x -> A x + b`` with exact Jacobian and inverse (global support)."""

    def __init__(self, A, b=None):
        A = np.asarray(A, dtype=float)
        super().__init__(A.shape[0], None)
        self.A = A
        self.b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)
        self.Ainv = np.linalg.inv(A)

    def _forward(self, x):
        return x @ self.A.T + self.b

    def _jac(self, x):
        return np.broadcast_to(self.A, (len(x),) + self.A.shape).copy()

    def inverse_and_jac(self, y):
        y = _as_points(y, self.dim)
        return (y - self.b) @ self.Ainv.T, self._jac(y)


class ComposedDiffeo(Diffeo):
    """``outer o inner``."""

    def __init__(self, outer, inner):
        sup = None
        if outer.support is not None and inner.support is not None:
            sup = outer.support.hull(inner.support)
        super().__init__(outer.dim, sup)
        self.outer, self.inner = outer, inner

    def forward(self, x):
        return self.outer.forward(self.inner.forward(x))

    def jac(self, x):
        xi = self.inner.forward(x)
        return self.outer.jac(xi) @ self.inner.jac(x)

    def inverse_and_jac(self, y):
        z, Jo = self.outer.inverse_and_jac(y)
        x, Ji = self.inner.inverse_and_jac(z)
        return x, Jo @ Ji


# ---------------------------------------------------------------------------
# pushforwards
# ---------------------------------------------------------------------------

def _pushforward_active(gamma, psi):
    if psi.support is None or (gamma.active is None and not gamma.constant):
        return None
    if gamma.constant:
        return psi.support
    return gamma.active.hull(psi.support)


class PushforwardConductivity(MatrixField):
    """``y -> [DPsi gamma DPsi^T / |det DPsi|](Psi^{-1}(y))``."""

    def __init__(self, gamma, psi, scale=1.0):
        act = _pushforward_active(gamma, psi)
        super().__init__(gamma.dim, None, act, merge_breaks(gamma.breaks, getattr(psi, "breaks", None)))
        self.gamma, self.psi, self.scale = gamma, psi, float(scale)

    def _eval(self, y):
        x, D = self.psi.inverse_and_jac(y)
        det = np.linalg.det(D)
        G = self.gamma.eval(x)
        return self.scale * (D @ G @ D.transpose(0, 2, 1)) / np.abs(det)[:, None, None]


class PushforwardMetric(MatrixField):
    """``y -> [DPsi^{-T} g DPsi^{-1}](Psi^{-1}(y))``."""

    def __init__(self, g, psi):
        act = _pushforward_active(g, psi)
        super().__init__(g.dim, None, act, merge_breaks(g.breaks, getattr(psi, "breaks", None)))
        self.g, self.psi = g, psi

    def _eval(self, y):
        x, D = self.psi.inverse_and_jac(y)
        Di = np.linalg.inv(D)
        return Di.transpose(0, 2, 1) @ self.g.eval(x) @ Di


def pushforward_conductivity(gamma: MatrixField, psi: Diffeo, scale=1.0) -> MatrixField:
    return PushforwardConductivity(gamma, psi, scale)


def pushforward_metric(g: MatrixField, psi: Diffeo) -> MatrixField:
    return PushforwardMetric(g, psi)


def det_pushforward_check(kappa: MatrixField, psi: Diffeo, pts, omega: Box | None = None,
                          quad: QuadratureRule | None = None):
    """Pointwise determinant law of the conductivity pushforward.

    Reports ``max |det((Psi_* kappa)(Psi(x))) - |det DPsi(x)|^{2-n} det kappa(x)|``
    and, when ``omega`` is given, the change in ``det_invariant``.
    """
    pts = _as_points(pts, kappa.dim)
    n = kappa.dim
    pk = pushforward_conductivity(kappa, psi)
    y = psi.forward(pts)
    lhs = np.linalg.det(pk.eval(y))
    rhs = np.abs(np.linalg.det(psi.jac(pts))) ** (2 - n) * np.linalg.det(kappa.eval(pts))
    rep = {"max_residual": float(np.max(np.abs(lhs - rhs))),
           "max_relative": float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))}
    if omega is not None:
        quad = quad or DEFAULT
        a = det_invariant(kappa, omega, quad)
        b = det_invariant(pk, omega, quad)
        rep.update(invariant=a, invariant_pushed=b, invariant_change=abs(b - a))
    return rep
