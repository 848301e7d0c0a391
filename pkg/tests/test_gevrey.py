import numpy as np
import pytest

from dnpairs.errors import BoundInapplicableError, NonQuasianalyticError, RadiusOrderError
from dnpairs.gevrey import (BumpSpec, GevreyBudget, algebra_check, bump_1d, bump_box,
                            derivative_loss_constant, reciprocal_bound_check, seminorm)
from dnpairs.quadrature import ORACLE
from dnpairs.tensorfield import Affine, Box, Constant, coordinate

UNIT = Box.cube(0.0, 1.0)


def brute_loss_constant(sigma, tau, tau_prime, m_max=100_000):
    m = np.arange(1, m_max + 1, dtype=float)
    logs = sigma * np.log(m) + (m - 1) * np.log(tau_prime / tau)
    return float(np.exp(logs.max())) / tau


# -- bumps -----------------------------------------------------------------

def test_bump_vanishes_at_and_beyond_endpoints():
    b = bump_1d(BumpSpec(Box((0.2,), (0.6,)), 2.0))
    x = np.array([[0.2], [0.6], [0.0], [0.9]])
    assert np.all(b.eval(x) == 0.0)
    assert np.all(b.grad(x) == 0.0)
    assert np.all(b.hess(x) == 0.0)


def test_bump_midpoint_value():
    b = bump_1d(BumpSpec(Box((0.0,), (1.0,)), 2.0))
    assert b.eval(np.array([[0.5]]))[0] == pytest.approx(np.exp(-2.0), rel=1e-15)


def test_unit_integral_bump():
    b = bump_1d(BumpSpec(Box((0.25,), (0.75,)), 2.0, "unit-integral"))
    val = ORACLE.integrate(b.eval, Box((0.25,), (0.75,)))
    assert abs(val - 1.0) <= 1e-10


def test_box_bump_support_and_center():
    box = Box((0.1, 0.2, 0.3), (0.5, 0.6, 0.9))
    b = bump_box(BumpSpec(box, 2.0))
    assert b.eval(np.array([[0.05, 0.4, 0.5], [0.3, 0.4, 0.95]])).tolist() == [0.0, 0.0]
    mids = np.prod([p.midpoint_value() for p in b.profiles])
    assert b.eval(box.center[None])[0] == pytest.approx(mids, rel=1e-14)


def test_box_bump_unit_integral():
    box = Box((0.1, 0.2, 0.3), (0.5, 0.6, 0.9))
    b = bump_box(BumpSpec(box, 2.0, "unit-integral"))
    assert abs(ORACLE.integrate(b.eval, box) - 1.0) <= 1e-9


def test_bump_requires_sigma_above_one():
    with pytest.raises(NonQuasianalyticError):
        BumpSpec(UNIT, 1.0)


# -- seminorms ---------------------------------------------------------------

@pytest.mark.parametrize("M", [0, 3, 8])
def test_seminorm_of_constant(M):
    assert seminorm(Constant(-2.5, 3), UNIT, GevreyBudget(2.0, 0.5, M)) == pytest.approx(2.5, abs=1e-15)


def test_seminorm_of_coordinate():
    assert seminorm(coordinate(0), UNIT, GevreyBudget(2.0, 0.5, 4)) == pytest.approx(1.5, abs=1e-15)


def test_seminorm_report_shells():
    rep = seminorm(Affine(np.array([1.0, 0.0, 0.0]), 0.0), UNIT, GevreyBudget(2.0, 0.5, 3), report=True)
    assert rep["shells"][0] == pytest.approx(1.0)
    assert rep["shells"][2] == 0.0 and rep["last_shell"] == 0.0


def test_loss_constant_worked_value():
    assert derivative_loss_constant(2.0, 0.5, 0.25) == pytest.approx(4.5, abs=1e-12)


def test_loss_constant_analytic_limit():
    assert derivative_loss_constant(1.0, 0.5, 0.0) == pytest.approx(2.0)
    assert derivative_loss_constant(1.0, 0.5, 1e-9) == pytest.approx(2.0, rel=1e-12)


def test_loss_constant_against_brute_force(rng):
    for _ in range(10):
        sigma = rng.uniform(1.0, 4.0)
        tau = rng.uniform(0.2, 2.0)
        tp = tau * rng.uniform(0.05, 0.95)
        fast = derivative_loss_constant(sigma, tau, tp)
        assert fast == pytest.approx(brute_loss_constant(sigma, tau, tp), rel=1e-12)


def test_loss_constant_radius_order():
    with pytest.raises(RadiusOrderError):
        derivative_loss_constant(2.0, 0.5, 0.5)


# -- algebra and reciprocal -------------------------------------------------

def test_algebra_constants():
    one = Constant(1.0, 3)
    rep = algebra_check(one, one, UNIT, GevreyBudget(2.0, 0.5, 4))
    assert rep["holds"] and rep["product"] == pytest.approx(1.0)


def test_algebra_equality_case():
    rep = algebra_check(coordinate(0), coordinate(1), UNIT, GevreyBudget(2.0, 0.5, 2))
    assert rep["product"] == pytest.approx(2.25, abs=1e-14)
    assert rep["f"] * rep["g"] == pytest.approx(2.25, abs=1e-14)
    assert rep["holds"]


def test_algebra_random_bump_pairs(rng):
    budget = GevreyBudget(2.0, 0.5, 4)
    for _ in range(20):
        boxes = []
        for _k in range(2):
            lo = rng.uniform(0.0, 0.4, size=3)
            boxes.append(Box(lo, lo + rng.uniform(0.4, 0.6, size=3)))
        f = bump_box(BumpSpec(boxes[0], 2.0, "unit-sup"))
        g = bump_box(BumpSpec(boxes[1], 2.0, "unit-sup"))
        assert algebra_check(f, g, UNIT, budget, lattice=9)["holds"]


def test_reciprocal_constants():
    budget = GevreyBudget(2.0, 0.5, 4)
    rep0 = reciprocal_bound_check(Constant(0.0, 3), UNIT, budget)
    assert rep0["reciprocal"] == pytest.approx(1.0) and rep0["bound"] == pytest.approx(1.0)
    assert rep0["holds"]
    rep = reciprocal_bound_check(Constant(0.5, 3), UNIT, budget)
    assert rep["reciprocal"] == pytest.approx(2.0 / 3.0) and rep["bound"] == pytest.approx(2.0)


def test_reciprocal_small_bump():
    # small radius so that 0.3 * bump is a small element of the algebra
    h = bump_box(BumpSpec(Box.cube(0.0, 1.0), 2.0, "unit-sup")).scaled(0.3)
    rep = reciprocal_bound_check(h, UNIT, GevreyBudget(2.0, 0.02, 3), lattice=9)
    assert rep["h"] < 1.0
    assert rep["holds"]


def test_reciprocal_bound_inapplicable():
    with pytest.raises(BoundInapplicableError):
        reciprocal_bound_check(Constant(1.0, 3), UNIT, GevreyBudget(2.0, 0.5, 2))
