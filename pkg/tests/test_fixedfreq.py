import json

import numpy as np
import pytest

from conftest import LAMBDA0, SWEEP
from dnpairs.errors import (DegenerateFrequencyError, DivisionError, EnergyThresholdError,
                            ForbiddenSlopeError, PositivityError)
from dnpairs.fixedfreq import (FreqConfig, PowerField, alpha_from, build_pair, build_test_function,
                               conformal_factor, lambda_eps, moment_oracle, nonisometry_certificate)
from dnpairs.quadrature import ORACLE, QuadratureRule
from dnpairs.tensorfield import Box, identity_matrix


# -- admissible exponents ------------------------------------------------------

def test_default_alpha():
    assert alpha_from(140.0, LAMBDA0) == pytest.approx(-0.1, abs=1e-15)


def test_forbidden_slope():
    # q = 8 lambda0 gives alpha = 1/6 in three dimensions
    with pytest.raises(ForbiddenSlopeError):
        alpha_from(8.0, 1.0)


@pytest.mark.parametrize("q, lam", [(8.0, 4.0), (4.0, 3.0), (0.0, -5.0)])
def test_inadmissible_alpha(q, lam):
    with pytest.raises(DivisionError):
        alpha_from(q, lam)


def test_zero_frequency_rejected():
    with pytest.raises(DegenerateFrequencyError):
        alpha_from(140.0, 0.0)


# -- two-moment function -----------------------------------------------------

def test_energy_threshold_small_q(freq_config):
    with pytest.raises(EnergyThresholdError):
        build_test_function(identity_matrix(), freq_config.Q0, 8.0)


def test_moments_against_refined_oracle(moment, freq_config):
    orc = moment_oracle(identity_matrix(), moment, freq_config.Q0, ORACLE)
    assert abs(orc["int_u"]) <= 1e-8
    assert abs(orc["int_uw"]) <= 1e-8
    assert abs(orc["l2_norm"] - 1.0) <= 1e-8
    assert abs(orc["energy"] - freq_config.q) <= 1e-6


def test_moment_function_support(moment, freq_config, rng):
    x = rng.random((2000, 3))
    out = ~freq_config.Q0.inside(x, closed=False)
    assert np.all(moment.u.eval(x[out]) == 0.0)
    assert moment.energy == pytest.approx(freq_config.q, rel=1e-8)


# -- conformal factor ----------------------------------------------------------

def test_conformal_factor_values(moment, rng):
    eps, a = 0.05, -0.1
    c = conformal_factor(moment, a, eps)
    x = rng.random((200, 3))
    base = 1 + eps * moment.u.eval(x)
    assert np.allclose(c.eval(x), base ** a, rtol=1e-14, atol=0)
    assert np.allclose(c.power(2).eval(x), base ** (2 * a), rtol=1e-14, atol=0)


def test_conformal_factor_gradient_fd(moment, freq_config, rng):
    c = conformal_factor(moment, -0.1, 0.05)
    x = freq_config.Q0.sample(100, rng)
    h = 1e-6
    fd = np.stack([(c.eval(x + h * e) - c.eval(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    assert np.max(np.abs(fd - c.grad(x))) <= 1e-7


def test_conformal_factor_positivity(moment):
    with pytest.raises(PositivityError):
        conformal_factor(moment, -0.1, 2.0 / moment.sup)


def test_power_field_exponent(moment, rng):
    x = rng.random((50, 3))
    p = PowerField(moment.u, 0.03, 1.5)
    assert np.allclose(p.eval(x), (1 + 0.03 * moment.u.eval(x)) ** 1.5, rtol=1e-14)


# -- frequency normalization -------------------------------------------------------

def _lambda_oracle(u, a, eps, box):
    pts, wts = QuadratureRule(96).tensor(box, u.breaks)
    v = 1 + eps * u.eval(pts)
    g = u.grad(pts)
    num = a * a * eps * eps * (wts @ (np.einsum("ni,ni->n", g, g) / v ** 2))
    den = wts @ (v ** (-2 * a) - 1.0)
    return num / den


def test_lambda_eps_against_oracle(freq_pairs):
    for eps in SWEEP:
        p = freq_pairs[eps]
        expect = _lambda_oracle(p.moment.u, p.alpha, eps, p.Q0)
        assert p.lambda_eps == pytest.approx(expect, rel=1e-8)


def test_lambda_eps_within_half(freq_pairs):
    for eps in SWEEP:
        assert abs(freq_pairs[eps].lambda_eps - LAMBDA0) <= 0.5 * abs(LAMBDA0)


def test_lambda_eps_numerator_leading_order(moment, freq_config):
    # int |grad c|^2 / c^2 = alpha^2 eps^2 q (1 + O(eps))
    a, eps = -0.1, 0.02
    c = conformal_factor(moment, a, eps)
    _, num, _ = lambda_eps(identity_matrix(), c, parts=True)
    assert num / (eps * eps * a * a * freq_config.q) == pytest.approx(1.0, rel=0.1)


def test_lambda_eps_degenerate(moment):
    with pytest.raises(DegenerateFrequencyError):
        lambda_eps(identity_matrix(), conformal_factor(moment, -0.1, 0.0))


def test_scale_factor_near_one(freq_pairs):
    for eps in SWEEP:
        p = freq_pairs[eps]
        assert p.s_eps == pytest.approx(LAMBDA0 / p.lambda_eps, rel=1e-15)
        assert abs(p.s_eps - 1.0) <= 2.0 * eps


# -- adapted density -----------------------------------------------------------------

def test_compatibility_residual(freq_pairs, rng):
    f = freq_pairs[0.05].f_eps
    x = freq_pairs[0.05].Q0.sample(1000, rng)
    res, scale = f.compatibility_residual(x)
    assert np.max(np.abs(res) / scale) <= 1e-12


def test_adapted_density_zero_mean(freq_pairs):
    p = freq_pairs[0.05]
    pts, wts = ORACLE.tensor(p.Q0, p.moment.u.breaks)
    assert abs(wts @ p.f_eps.eval(pts)) <= 1e-6


def test_adapted_density_scales_with_eps(freq_pairs):
    sups = [freq_pairs[e].certificates["sup_f"] / e for e in SWEEP]
    assert max(sups) <= 1.5 * min(sups)
    assert freq_pairs[0.08].certificates["sup_f"] < 0.5


def test_adapted_density_vanishes_outside(freq_pairs, rng):
    p = freq_pairs[0.05]
    x = rng.random((1000, 3))
    out = ~p.Q0.inside(x, closed=False)
    assert np.max(np.abs(p.f_eps.eval(x[out]))) == 0.0


# -- pairs ----------------------------------------------------------------------------

def test_pair_certificates(freq_pairs):
    cert = freq_pairs[0.05].certificates
    assert cert["jacobian"]["max_det_residual"] <= 1e-5
    assert cert["compatibility_rel"] <= 1e-12
    # quadrature residual of int f, removed by the projection before the flow
    assert abs(cert["mean_removed"]) <= 1e-4


def test_pair_coefficients_agree_outside_q0(freq_pairs, rng):
    p = freq_pairs[0.04]
    x = rng.random((500, 3))
    out = ~p.Q0.inside(x, closed=False)
    assert np.allclose(p.gamma1.eval(x[out]), p.gamma2.eval(x[out]), rtol=1e-14, atol=0)


def test_pair_coefficients_linear_in_eps(freq_pairs):
    x = Box.cube(0.1, 0.9).lattice(7)
    for which in ("gamma1", "gamma2"):
        dev = [np.max(np.abs(getattr(freq_pairs[e], which).eval(x) - np.eye(3))) for e in SWEEP]
        ratios = [b / a for a, b in zip(dev, dev[1:])]
        assert all(1.6 <= r <= 2.4 for r in ratios), (which, dev)


def test_eps_zero(moment):
    with pytest.raises(DegenerateFrequencyError):
        build_pair(identity_matrix(), LAMBDA0, 0.0, FreqConfig(), moment=moment)
    p = build_pair(identity_matrix(), LAMBDA0, 0.0, FreqConfig(allow_degenerate=True), moment=moment)
    assert p.certificates["degenerate"]
    x = np.random.default_rng(3).random((20, 3))
    assert np.array_equal(p.gamma1.eval(x), p.gamma2.eval(x))


def test_pair_json_round_trip(freq_pairs):
    d = json.loads(freq_pairs[0.02].dumps())
    assert d["alpha"] == pytest.approx(-0.1) and d["eps"] == 0.02


# -- determinant invariant --------------------------------------------------------------

@pytest.fixture(scope="module")
def noniso(freq_pairs):
    return nonisometry_certificate(freq_pairs[0.02])


def test_nonisometry_coefficient(noniso):
    assert noniso["coefficient"] == pytest.approx(0.48, abs=1e-14)


def test_nonisometry_sign_and_ratio(noniso):
    assert noniso["nonzero"] and noniso["sign_agrees"]
    assert 0.8 <= noniso["ratio"] <= 1.2


def test_invariant_of_gamma1_scales(noniso):
    # I(gamma1) = s^3 I(gamma); the quadrature error must stay well below the gap
    assert noniso["scaling_invariance_gap"] <= 0.05 * abs(noniso["delta"])
