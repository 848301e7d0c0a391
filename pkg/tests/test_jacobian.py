import numpy as np
import pytest

from dnpairs.errors import DensityPositivityError, MeanConstraintError, ResolutionError, SupportError
from dnpairs.gevrey import BumpSpec, GevreyBudget, bump_box, seminorm
from dnpairs.jacobian import (JacobianConfig, SeparablePrimitive, div_constant, div_primitive,
                              jacobian_certificate, make_cutoffs, moser_flow, prescribed_jacobian)
from dnpairs.profiles import SeparableField
from dnpairs.quadrature import QuadratureRule
from dnpairs.suite import gentle_density
from dnpairs.tensorfield import Box, Constant

Q = Box.cube(0.15, 0.85)
K0 = Box.cube(0.2, 0.8)


@pytest.fixture(scope="module")
def beta_difference():
    """0.01 (beta1 - beta2) on the two halves of K0; sup about 0.35, the flow regime."""
    b1 = bump_box(BumpSpec(Box((0.2, 0.2, 0.2), (0.5, 0.8, 0.8)), 2.0, "unit-integral"))
    b2 = bump_box(BumpSpec(Box((0.5, 0.2, 0.2), (0.8, 0.8, 0.8)), 2.0, "unit-integral"))
    return b1.plus(b2, -1.0).scaled(0.01)


@pytest.fixture(scope="module")
def gentle_flow():
    h = gentle_density()
    prim = div_primitive(h, Q, K0=K0)
    return h, prim


# -- divergence primitive ------------------------------------------------------

def test_zero_density_zero_field(rng):
    prim = div_primitive(Constant(0.0, 3), Q, K0=K0)
    X, DX, dv, _ = prim.evaluate(rng.random((50, 3)))
    assert not X.any() and not DX.any() and not dv.any()


def test_one_dimensional_constant():
    I1 = Box((0.25,), (0.75,))
    assert div_constant(I1, GevreyBudget(2.0, 0.5), make_cutoffs(I1)) == pytest.approx(1.0, abs=1e-15)


def test_two_dimensional_constant_recursion():
    Q2 = Box((0.2, 0.3), (0.7, 0.9))
    budget = GevreyBudget(2.0, 0.5, 8)
    cut = make_cutoffs(Q2)
    # first compute Theta_1 by the seminorm, then evaluate the recursion by hand
    T1 = seminorm(SeparableField([(1.0, (cut[0],))]), Q2.interval(0), budget)
    L1, L2, tau = 0.5, 0.6, 0.5
    expect = (L1 + tau) * (1 + L1 * T1) + L1 * T1 * (L2 + tau)
    assert div_constant(Q2, budget, cut) == pytest.approx(expect, rel=1e-14)


def test_constant_increases_with_radius():
    cut = make_cutoffs(K0)
    vals = [div_constant(K0, GevreyBudget(2.0, t, 4), cut, lattice=9) for t in (0.1, 0.3, 0.5, 1.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("route", ["separable", "spline"])
def test_divergence_matches_density(beta_difference, rng, route):
    prim = div_primitive(beta_difference, Q, K0=K0, route=route)
    x = K0.sample(1000, rng)
    gap = np.abs(prim.fd_divergence(x, 1e-4) - beta_difference.eval(x))
    assert gap.max() <= 1e-6


@pytest.mark.parametrize("route", ["separable", "spline"])
def test_field_vanishes_outside_support(beta_difference, rng, route):
    prim = div_primitive(beta_difference, Q, K0=K0, route=route)
    x = rng.random((2000, 3))
    out = ~K0.inside(x, closed=False)
    X, DX, _, _ = prim.evaluate(x[out])
    assert np.all(X == 0.0) and np.all(DX == 0.0)


def test_separable_quadrature_doubling(beta_difference, rng):
    cut = make_cutoffs(K0)
    x = K0.sample(300, rng)
    a = SeparablePrimitive(beta_difference, K0, cut, nodes=64).X(x)
    b = SeparablePrimitive(beta_difference, K0, cut, nodes=128).X(x)
    assert np.max(np.abs(a - b)) <= 1e-9


def test_nonzero_mean_rejected():
    b = bump_box(BumpSpec(Box.cube(0.3, 0.6), 2.0, "unit-integral"))
    with pytest.raises(MeanConstraintError):
        div_primitive(b, Q, K0=K0)


def test_support_must_fit():
    b = bump_box(BumpSpec(Box.cube(0.1, 0.6), 2.0, "unit-integral"))
    with pytest.raises(SupportError):
        div_primitive(b, Q, K0=K0)


# -- Moser flow ------------------------------------------------------------------

def test_identity_for_zero_density(rng):
    psi = prescribed_jacobian(Constant(0.0, 3), K0, Q)
    x = rng.random((30, 3))
    assert np.array_equal(psi.forward(x), x)
    assert np.allclose(np.linalg.det(psi.jac(x)), 1.0, atol=0)
    assert psi.flow.drift == 0.0


def test_flow_determinant_and_fd_oracle(gentle_flow, rng):
    h, prim = gentle_flow
    psi = moser_flow(h, prim, 64).Psi
    x = K0.sample(1000, rng)
    cert = jacobian_certificate(psi, h, x)
    assert cert["max_det_residual"] <= 1e-5
    assert cert["max_fd_det_gap"] <= 1e-6


def test_flow_identity_outside_support(gentle_flow, rng):
    h, prim = gentle_flow
    psi = moser_flow(h, prim, 32).Psi
    x = rng.random((1000, 3))
    out = ~K0.inside(x, closed=False)
    assert np.array_equal(psi.forward(x[out]), x[out])


def test_drift_fourth_order(gentle_flow):
    h, prim = gentle_flow
    pts = K0.lattice(6)
    d = [moser_flow(h, prim, s, check_points=pts).drift for s in (16, 32)]
    assert d[0] / d[1] >= 12.0


def test_volume_conservation(gentle_flow):
    h, prim = gentle_flow
    psi = moser_flow(h, prim, 64).Psi
    rule = QuadratureRule(12)
    vol = rule.integrate(lambda x: np.linalg.det(psi.jac(x)), K0, prim.breaks)
    assert abs(vol - K0.volume) <= 1e-8


def test_flow_rejects_large_density(beta_difference):
    big = beta_difference.scaled(5.0)
    prim = div_primitive(big, Q, K0=K0)
    with pytest.raises(DensityPositivityError):
        moser_flow(big, prim, 64)


def test_flow_needs_enough_steps(gentle_flow):
    h, prim = gentle_flow
    with pytest.raises(ResolutionError):
        moser_flow(h, prim, 4)


def test_fixedfreq_density_certificate(freq_pairs, rng):
    pair = freq_pairs[0.05]
    x = pair.Q0.sample(1000, rng)
    cert = jacobian_certificate(pair.Psi, pair.f_eps, x)
    assert cert["max_det_residual"] <= 1e-5
    assert cert["max_fd_det_gap"] <= 1e-5


def test_prescribed_jacobian_projects_mean(rng):
    b = bump_box(BumpSpec(Box.cube(0.3, 0.6), 2.0, "unit-integral")).scaled(0.002)
    psi = prescribed_jacobian(b, K0, Q, JacobianConfig(steps=32))
    assert psi.mean_removed == pytest.approx(0.002, abs=1e-9)
    x = K0.sample(200, rng)
    target = psi.projected
    assert np.max(np.abs(np.linalg.det(psi.jac(x)) - 1.0 - target.eval(x))) <= 1e-6
