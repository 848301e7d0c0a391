import json

import numpy as np
import pytest

from dnpairs.errors import ChartError, ConstantPotentialError, DegenerateFrequencyError
from dnpairs.fixedfreq import PowerField
from dnpairs.fixedpot import (PotConfig, build_pair_fp, bump_function, compensating_diffeo,
                              default_potential, effective_potential,
                              effective_potential_perturbation, find_submersion_box,
                              laplace_beltrami, volume_certificate)
from dnpairs.tensorfield import Constant, ConstantMatrix, FunctionField, identity_matrix


def _sin_potential():
    def f(x):
        return np.sin(3 * x[:, 0]) + x[:, 1]

    def g(x):
        out = np.zeros_like(x)
        out[:, 0] = 3 * np.cos(3 * x[:, 0])
        out[:, 1] = 1.0
        return out

    return FunctionField(3, f, g)


def _quadratic_potential():
    """V = 1 + x1 + 0.3 x1^2 + 0.1 x2 x3, analytic derivatives."""
    def f(x):
        return 1 + x[:, 0] + 0.3 * x[:, 0] ** 2 + 0.1 * x[:, 1] * x[:, 2]

    def g(x):
        return np.stack([1 + 0.6 * x[:, 0], 0.1 * x[:, 2], 0.1 * x[:, 1]], axis=1)

    def h(x):
        H = np.zeros((len(x), 3, 3))
        H[:, 0, 0] = 0.6
        H[:, 1, 2] = H[:, 2, 1] = 0.1
        return H

    return FunctionField(3, f, g, h)


@pytest.fixture(scope="module")
def pot_pair():
    return build_pair_fp(eps=0.05)


# -- submersion box -------------------------------------------------------------

def test_submersion_box_affine():
    sb = find_submersion_box(default_potential())
    assert sb.axis == 0 and sb.min_slope == pytest.approx(1.0)
    assert np.allclose(sb.U.lo, 0.05) and np.allclose(sb.U.hi, 0.95)


def test_submersion_box_sine():
    V = _sin_potential()
    sb = find_submersion_box(V)
    assert sb.axis == 0
    # |3 cos 3 x1| stays above half its peak only for x1 below about 0.35
    assert sb.U.hi[0] <= 0.36
    d = np.abs(V.grad(sb.U.lattice(9))[:, 0])
    assert d.min() >= 0.5 * d.max() - 1e-12


def test_constant_potential_rejected():
    with pytest.raises(ConstantPotentialError):
        find_submersion_box(Constant(2.0, 3))


# -- effective potential --------------------------------------------------------------

def _fd_laplacian(c, x, h=1e-3):
    # fourth-order five-point stencil per axis
    out = np.zeros(len(x))
    c0 = c.eval(x)
    for e in np.eye(3):
        out += (-c.eval(x + 2 * h * e) + 16 * c.eval(x + h * e) - 30 * c0
                + 16 * c.eval(x - h * e) - c.eval(x - 2 * h * e)) / (12 * h * h)
    return out


def test_effective_potential_formula(rng):
    cfg = PotConfig()
    V = default_potential()
    u = bump_function(cfg)
    eps = 0.05
    c = PowerField(u, eps, 1.0)
    T = effective_potential(identity_matrix(), V, c)
    x = cfg.Q0.sample(500, rng)
    cv = 1 + eps * u.eval(x)
    expect = V.eval(x) * cv ** 4 + _fd_laplacian(c, x) / cv
    assert np.max(np.abs(T.eval(x) - expect)) <= 1e-8


def test_laplace_beltrami_constant_metric(rng):
    u = bump_function(PotConfig())
    c = PowerField(u, 0.1, 1.0)
    x = PotConfig().Q0.sample(100, rng)
    lap = laplace_beltrami(identity_matrix(), c, x)
    lap4 = laplace_beltrami(ConstantMatrix(4 * np.eye(3)), c, x)
    assert np.allclose(lap4, lap / 4, rtol=1e-12, atol=1e-15)


def test_effective_potential_equals_v_outside(pot_pair, rng):
    x = rng.random((1000, 3))
    out = ~pot_pair.Q0.inside(x, closed=False)
    assert np.array_equal(pot_pair.T_eps.eval(x[out]), pot_pair.V.eval(x[out]))


def test_perturbation_linear_in_eps():
    cfg = PotConfig()
    V = default_potential()
    u = bump_function(cfg)
    pts = cfg.Q0.lattice(15)
    d = [effective_potential_perturbation(effective_potential(identity_matrix(), V, PowerField(u, e, 1.0)),
                                          V, pts) for e in (0.02, 0.04, 0.08)]
    assert all(v > 0 for v in d)
    assert all(b / a == pytest.approx(2.0, rel=0.05) for a, b in zip(d, d[1:]))


# -- compensating map ---------------------------------------------------------------

def test_closed_form_chart(pot_pair, rng):
    x = pot_pair.Q0.sample(1000, rng)
    y = pot_pair.Psi.forward(x)
    assert np.max(np.abs(pot_pair.V.eval(y) - pot_pair.T_eps.eval(x))) <= 1e-12
    assert np.array_equal(y[:, 1:], x[:, 1:])


def test_newton_chart_nonlinear(rng):
    V = _quadratic_potential()
    cfg = PotConfig()
    c = PowerField(bump_function(cfg), 0.05, 1.0)
    T = effective_potential(identity_matrix(), V, c)
    psi = compensating_diffeo(V, T, find_submersion_box(V))
    x = cfg.Q0.sample(500, rng)
    y = psi.forward(x)
    assert np.max(np.abs(V.eval(y) - T.eval(x))) <= 1e-10


def test_chart_outside_range():
    V = _quadratic_potential()
    psi = compensating_diffeo(V, Constant(10.0, 3), find_submersion_box(V))
    with pytest.raises(ChartError):
        psi.forward(np.full((2, 3), 0.5))


def test_pair_certificates(pot_pair):
    cert = pot_pair.certificates
    assert cert["compatibility_residual"] <= 1e-12
    assert cert["perturbation"] > 0
    assert cert["min_det"] > 0.5


def test_eps_zero():
    with pytest.raises(DegenerateFrequencyError):
        build_pair_fp(eps=0.0)
    p = build_pair_fp(eps=0.0, config=PotConfig(allow_degenerate=True))
    assert p.certificates["degenerate"]


def test_pair_json(pot_pair):
    d = json.loads(pot_pair.dumps())
    assert d["eps"] == 0.05 and d["submersion"]["axis"] == 0


# -- volumes ---------------------------------------------------------------------

def test_volume_certificate(pot_pair):
    rep = volume_certificate(pot_pair)
    assert rep["vol_g"] == pytest.approx(1.0, abs=1e-14)
    assert rep["vol_gap_g1"] <= 1e-6
    assert rep["positive"]
    assert rep["surplus_mismatch"] <= 1e-8
    # leading order 6 eps int u
    assert rep["surplus"] == pytest.approx(rep["first_order"], rel=0.05)
