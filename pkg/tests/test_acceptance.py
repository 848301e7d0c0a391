"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end. The DN refinement runs (criteria 5, 6 and the margin part
of 10) dominate the runtime, roughly 20 minutes on one core.
"""
import time

import numpy as np
import pytest

from conftest import LAMBDA0, SWEEP, record_criterion
from dnpairs.cli import loglog_slope
from dnpairs.dnmap import (CoefficientPair, Mesh, control_compare, dn_compare,
                           solution_correspondence, spectral_margin)
from dnpairs.fixedfreq import moment_oracle, nonisometry_certificate
from dnpairs.fixedpot import build_pair_fp, volume_certificate
from dnpairs.gevrey import BumpSpec, GevreyBudget, bump_box
from dnpairs.jacobian import (div_constant, div_primitive, jacobian_certificate, make_cutoffs,
                              moser_flow, prescribed_jacobian)
from dnpairs.quadrature import ORACLE
from dnpairs.suite import dictionary_round_trip, dn_small, gevrey_checks, pushforward_law
from dnpairs.tensorfield import Box, identity_matrix

MESHES = (17, 33)
DN_EPS = 0.05


def _fmt(x):
    return f"{x:.3g}"


@pytest.fixture(scope="module")
def pot_pairs():
    return {e: build_pair_fp(eps=e) for e in SWEEP + (DN_EPS,)}


@pytest.fixture(scope="module")
def ff_dn(freq_pairs):
    return dn_compare(freq_pairs[DN_EPS], MESHES)


@pytest.fixture(scope="module")
def fp_dn(pot_pairs):
    return dn_compare(pot_pairs[DN_EPS], MESHES)


@pytest.fixture(scope="module")
def control():
    return control_compare(identity_matrix(), LAMBDA0, MESHES)


# 1 -----------------------------------------------------------------------------------

def test_criterion_01_prescribed_jacobian(freq_pairs, freq_config, rng):
    p = freq_pairs[DN_EPS]
    t0 = time.perf_counter()
    psi = prescribed_jacobian(p.f_eps, freq_config.Q0, freq_config.Q, freq_config.jacobian)
    x = freq_config.Q0.sample(1000, rng)
    cert = jacobian_certificate(psi, p.f_eps, x)
    pts = freq_config.Q0.lattice(10)
    drift = [moser_flow(psi.projected, psi.primitive, s, check_points=pts).drift for s in (32, 64)]
    seconds = time.perf_counter() - t0
    ratio = drift[0] / drift[1]
    ok = (cert["max_det_residual"] <= 1e-5 and cert["max_fd_det_gap"] <= 1e-5
          and ratio >= 12 and seconds <= 60)
    detail = (f"det residual {_fmt(cert['max_det_residual'])} (<= 1e-5), FD gap "
              f"{_fmt(cert['max_fd_det_gap'])}, drift ratio {ratio:.1f} (>= 12), {seconds:.1f} s")
    assert record_criterion(1, "prescribed Jacobian", ok, detail), detail


# 2 -----------------------------------------------------------------------------------

def test_criterion_02_divergence_primitive(rng):
    Q, K0 = Box.cube(0.15, 0.85), Box.cube(0.2, 0.8)
    b1 = bump_box(BumpSpec(Box((0.2, 0.2, 0.2), (0.5, 0.8, 0.8)), 2.0, "unit-integral"))
    b2 = bump_box(BumpSpec(Box((0.5, 0.2, 0.2), (0.8, 0.8, 0.8)), 2.0, "unit-integral"))
    h = b1.plus(b2, -1.0).scaled(0.01)
    x = K0.sample(1000, rng)
    far = rng.random((4000, 3))
    far = far[~K0.inside(far, closed=False)]
    gaps, outside = {}, True
    for route in ("separable", "spline"):
        prim = div_primitive(h, Q, K0=K0, route=route)
        gaps[route] = float(np.max(np.abs(prim.fd_divergence(x, 1e-4) - h.eval(x))))
        X, DX, _, _ = prim.evaluate(far)
        outside &= bool(np.all(X == 0.0) and np.all(DX == 0.0))
    I1 = Box((0.25,), (0.75,))
    one_d = div_constant(I1, GevreyBudget(2.0, 0.5), make_cutoffs(I1))
    ok = max(gaps.values()) <= 1e-6 and outside and one_d == 0.5 + 0.5
    detail = (f"|div X - h| separable {_fmt(gaps['separable'])}, spline {_fmt(gaps['spline'])} "
              f"(<= 1e-6), zero outside K0 {outside}, 1D constant {one_d!r} (= 1.0)")
    assert record_criterion(2, "divergence primitive", ok, detail), detail


# 3 -----------------------------------------------------------------------------------

def test_criterion_03_two_moments(moment, freq_config):
    o = moment_oracle(identity_matrix(), moment, freq_config.Q0, ORACLE)
    m = max(abs(o["int_u"]), abs(o["int_uw"]), abs(o["l2_norm"] - 1.0))
    e = abs(o["energy"] - freq_config.q)
    ok = m <= 1e-8 and e <= 1e-6
    detail = f"moments/norm {_fmt(m)} (<= 1e-8), energy gap {_fmt(e)} (<= 1e-6) at q = {freq_config.q:g}"
    assert record_criterion(3, "two-moment function", ok, detail), detail


# 4 -----------------------------------------------------------------------------------

def test_criterion_04_frequency_normalization(freq_pairs):
    lam = [freq_pairs[e].lambda_eps for e in SWEEP]
    dev = [abs(v - LAMBDA0) for v in lam]
    near = all(d <= 0.5 * abs(LAMBDA0) for d in dev)
    slope = loglog_slope(SWEEP, dev)
    comp = max(freq_pairs[e].certificates["compatibility_rel"] for e in SWEEP)
    ok = near and 0.9 <= slope <= 1.1 and comp <= 1e-12
    detail = (f"|lambda_eps - lambda0| = {[round(d, 4) for d in dev]} (<= {0.5 * abs(LAMBDA0):g}), "
              f"slope {slope:.3f} (in [0.9, 1.1]), compatibility {_fmt(comp)} (<= 1e-12)")
    assert record_criterion(4, "frequency normalization", ok, detail), detail


# 7 -----------------------------------------------------------------------------------

def test_criterion_07_nonisometry_fixed_frequency(freq_pairs):
    rep = nonisometry_certificate(freq_pairs[0.02])
    ok = (rep["nonzero"] and rep["sign_agrees"] and 0.8 <= rep["ratio"] <= 1.2
          and abs(rep["coefficient"] - 0.48) <= 1e-12)
    detail = (f"delta {_fmt(rep['delta'])}, predicted {_fmt(rep['predicted'])}, ratio "
              f"{rep['ratio']:.4f} (in [0.8, 1.2]), coefficient {rep['coefficient']:.6g} (= 0.48)")
    assert record_criterion(7, "non-isometry, fixed frequency", ok, detail), detail


# 8 -----------------------------------------------------------------------------------

def test_criterion_08_nonisometry_fixed_potential(pot_pairs):
    reps = [volume_certificate(pot_pairs[e]) for e in SWEEP]
    gap = max(r["vol_gap_g1"] for r in reps)
    mis = max(r["surplus_mismatch"] for r in reps)
    pos = all(r["positive"] for r in reps)
    ok = gap <= 1e-6 and mis <= 1e-8 and pos
    detail = (f"|Vol(g1) - Vol(g)| {_fmt(gap)} (<= 1e-6), surplus {[_fmt(r['surplus']) for r in reps]} "
              f"positive {pos}, oracle mismatch {_fmt(mis)} (<= 1e-8)")
    assert record_criterion(8, "non-isometry, fixed potential", ok, detail), detail


# 11 ----------------------------------------------------------------------------------

def test_criterion_11_effective_potential(pot_pairs):
    pert = [pot_pairs[e].certificates["perturbation"] for e in SWEEP]
    slope = loglog_slope(SWEEP, pert)
    ok = all(p > 0 for p in pert) and 0.9 <= slope <= 1.1
    detail = f"sup |T - V| = {[_fmt(p) for p in pert]} (> 0), slope {slope:.3f} (in [0.9, 1.1])"
    assert record_criterion(11, "effective-potential perturbation", ok, detail), detail


# 12 ----------------------------------------------------------------------------------

def test_criterion_12_gevrey_suite():
    g = gevrey_checks(np.random.default_rng(0))
    closed = max(g["constant_gap"], g["linear_gap"])
    ok = (closed <= 1e-12 and g["algebra_holds"] == g["algebra_pairs"]
          and g["loss_brute_gap"] <= 1e-12 and abs(g["loss_constant"] - 4.5) <= 1e-12)
    detail = (f"closed forms {_fmt(closed)} (<= 1e-12), algebra {g['algebra_holds']}/{g['algebra_pairs']}, "
              f"loss constant {g['loss_constant']!r} (= 4.5), brute gap {_fmt(g['loss_brute_gap'])}")
    assert record_criterion(12, "Gevrey suite", ok, detail), detail


# 9 -----------------------------------------------------------------------------------

def test_criterion_09_exact_identities(ff_dn, fp_dn):
    rng = np.random.default_rng(0)
    rt = dictionary_round_trip(rng)
    pf = pushforward_law(rng)
    dn = dn_small(rng)
    scaling = max(dn["scaling_identity"], dn["scaling_diagonal"])
    sym = max([dn["symmetry"]] + [m["symmetry"] for r in (ff_dn, fp_dn) for m in r["meshes"]])
    ok = scaling <= 1e-10 and max(pf.values()) <= 1e-10 and rt <= 1e-12 and sym <= 1e-10
    detail = (f"scaling law {_fmt(scaling)} (<= 1e-10), determinant law affine {_fmt(pf['affine'])} "
              f"flow {_fmt(pf['flow'])} (<= 1e-10), round trip {_fmt(rt)} (<= 1e-12), "
              f"DN symmetry {_fmt(sym)} (<= 1e-10)")
    assert record_criterion(9, "exact identities", ok, detail), detail


# 10 ----------------------------------------------------------------------------------

def test_criterion_10_spectral_guard(ff_dn, fp_dn):
    mu = spectral_margin(CoefficientPair.conductivity(identity_matrix(), 0.0), Mesh(33), report=True)["mu_min"]
    exact = 3 * np.pi ** 2
    rel = abs(mu - exact) / exact
    margins = [min(m["margin_1"], m["margin_2"]) for r in (ff_dn, fp_dn) for m in r["meshes"]]
    ok = rel <= 0.02 and min(margins) > 0
    detail = (f"mu_min {mu:.4f} vs 3 pi^2 = {exact:.4f}, rel {_fmt(rel)} (<= 0.02), "
              f"smallest pipeline margin {min(margins):.3f} (> 0)")
    assert record_criterion(10, "spectral guard", ok, detail), detail


# 5 -----------------------------------------------------------------------------------

def test_criterion_05_dn_equality(ff_dn, fp_dn, control):
    slowest = max(ff_dn["meshes"][-1]["seconds"], fp_dn["meshes"][-1]["seconds"])
    ok = ff_dn["decreasing"] and fp_dn["decreasing"] and control["stabilizes"] and slowest <= 600
    detail = (f"fixed frequency d = {[_fmt(d) for d in ff_dn['distances']]} ratio "
              f"{ff_dn['ratios'][0]:.2f}; fixed potential d = {[_fmt(d) for d in fp_dn['distances']]} "
              f"ratio {fp_dn['ratios'][0]:.2f} (>= 1.5); control d = "
              f"{[_fmt(d) for d in control['distances']]} stabilizes {control['stabilizes']} (> 1e-3); "
              f"m = 33 pair time {slowest:.0f} s (<= 600)")
    assert record_criterion(5, "DN equality", ok, detail), detail


# 6 -----------------------------------------------------------------------------------

def test_criterion_06_solution_correspondence(freq_pairs):
    reps = [solution_correspondence(freq_pairs[DN_EPS], Mesh(m)) for m in MESHES]
    res = [r["residual"] for r in reps]
    ratio = res[0] / res[1]
    ok = ratio >= 1.5
    detail = (f"dual-norm residual {[_fmt(r) for r in res]} at m = {list(MESHES)}, ratio {ratio:.2f} "
              f"(>= 1.5); relative {[_fmt(r['relative']) for r in reps]}")
    assert record_criterion(6, "solution correspondence", ok, detail), detail
