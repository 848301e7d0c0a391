"""Exact-identity suite shared by ``dnpairs verify`` and the tests.

Everything here is cheap: algebraic identities, small flows and m = 9
discrete DN maps. Results depend only on the seed.
"""
from __future__ import annotations

import numpy as np

from .dnmap import CoefficientPair, Mesh, dn_matrix, scaling_law_check
from .gevrey import (BumpSpec, GevreyBudget, algebra_check, bump_box,
                     derivative_loss_constant, seminorm)
from .jacobian import div_primitive, moser_flow
from .tensorfield import (AffineDiffeo, Affine, Box, Constant, ConstantMatrix,
                          FunctionMatrix, conductivity_from_metric,
                          det_pushforward_check, identity_matrix,
                          metric_from_conductivity)


def _random_spd(rng, n=3, lo=0.5):
    B = rng.normal(size=(n, n))
    return B @ B.T + lo * np.eye(n)


def random_conductivity(rng):
    """Smooth, uniformly elliptic, nonconstant conductivity on the cube."""
    A0 = _random_spd(rng)
    A1 = rng.normal(size=(3, 3))
    A1 = 0.1 * (A1 + A1.T)
    k = rng.uniform(1.0, 3.0, size=3)

    def fn(x):
        s = np.sin(x @ k)
        return A0[None] + s[:, None, None] * A1[None]

    return FunctionMatrix(3, fn)


def gentle_density():
    """Gentle mean-zero separable density with support inside [0.2, 0.8]^3."""
    b1 = bump_box(BumpSpec(Box((0.2, 0.2, 0.2), (0.5, 0.8, 0.8)), 2.0, "unit-integral"))
    b2 = bump_box(BumpSpec(Box((0.5, 0.2, 0.2), (0.8, 0.8, 0.8)), 2.0, "unit-integral"))
    return b1.plus(b2, -1.0).scaled(0.002)


def dictionary_round_trip(rng, samples=200):
    gamma = random_conductivity(rng)
    x = rng.random((samples, 3))
    back = conductivity_from_metric(metric_from_conductivity(gamma))
    G = gamma.eval(x)
    return float(np.max(np.abs(back.eval(x) - G)) / np.max(np.abs(G)))


def pushforward_law(rng, samples=200):
    gamma = random_conductivity(rng)
    A = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
    if np.linalg.det(A) < 0:
        A[:, 0] *= -1
    aff = AffineDiffeo(A, 0.1 * rng.normal(size=3))
    x = rng.random((samples, 3))
    rep_aff = det_pushforward_check(gamma, aff, x)
    h = gentle_density()
    K0 = Box.cube(0.2, 0.8)
    prim = div_primitive(h, Box.cube(0.15, 0.85), K0=K0)
    flow = moser_flow(h, prim, 32).Psi
    xs = K0.lattice(6)
    rep_flow = det_pushforward_check(gamma, flow, xs)
    return {"affine": rep_aff["max_relative"], "flow": rep_flow["max_relative"]}


def moser_drift_orders(steps=(16, 32, 64)):
    h = gentle_density()
    prim = div_primitive(h, Box.cube(0.15, 0.85), K0=Box.cube(0.2, 0.8))
    pts = Box.cube(0.2, 0.8).lattice(6)
    drift = [moser_flow(h, prim, s, check_points=pts).drift for s in steps]
    return {"steps": list(steps), "drift": drift,
            "ratios": [drift[k] / drift[k + 1] for k in range(len(drift) - 1)]}


def dn_small(rng, m=9):
    mesh = Mesh(m)
    gamma = random_conductivity(rng)
    c = CoefficientPair.conductivity(gamma, -1.0, "random")
    L = dn_matrix(c, mesh)
    Ld = dn_matrix(c, mesh, method="dense")
    diag = np.diag(rng.uniform(0.5, 2.0, size=3))
    return {"symmetry": L.symmetry(),
            "dense_gap": float(np.max(np.abs(L.entries - Ld.entries))),
            "scaling_identity": scaling_law_check(identity_matrix(), -1.0, 2.0, mesh),
            "scaling_diagonal": scaling_law_check(ConstantMatrix(diag), -1.0, 0.5, mesh)}


def gevrey_checks(rng, pairs=20):
    budget = GevreyBudget(2.0, 0.5, 6)
    K = Box.cube(0.0, 1.0)
    const = abs(seminorm(Constant(-2.5, 3), K, budget) - 2.5)
    a = np.array([1.0, -2.0, 0.5])
    lin = Affine(a, 0.25)
    # sup |a.x + b| over the cube sits at a vertex; first derivatives are the a_i
    closed = max(abs(0.25 + a.clip(min=0).sum()), abs(0.25 + a.clip(max=0).sum())) + budget.tau * abs(a).sum()
    linear = abs(seminorm(lin, K, budget) - closed)
    holds = []
    small = GevreyBudget(2.0, 0.5, 4)
    for _ in range(pairs):
        boxes = []
        for _k in range(2):
            lo = rng.uniform(0.0, 0.4, size=3)
            boxes.append(Box(lo, lo + rng.uniform(0.4, 0.6, size=3)))
        f = bump_box(BumpSpec(boxes[0], 2.0, "unit-sup"))
        g = bump_box(BumpSpec(boxes[1], 2.0, "unit-sup"))
        holds.append(algebra_check(f, g, K, small, lattice=9)["holds"])
    lc = derivative_loss_constant(2.0, 0.5, 0.25)
    brute = max(m ** 2 * 0.5 ** (m - 1) for m in range(1, 200)) / 0.5
    return {"constant_gap": const, "linear_gap": linear, "algebra_holds": int(sum(holds)),
            "algebra_pairs": pairs, "loss_constant": lc, "loss_brute_gap": abs(lc - brute)}


def identity_suite(seed=0):
    """Run every exact identity and return a report with verdicts."""
    from .cli import verdict
    rng = np.random.default_rng(seed)
    rt = dictionary_round_trip(rng)
    pf = pushforward_law(rng)
    dr = moser_drift_orders()
    dn = dn_small(rng)
    gv = gevrey_checks(rng)
    v = {
        "dictionary_round_trip": verdict(rt, 1e-12, "gamma -> g_gamma -> gamma_g", rt <= 1e-12, "<="),
        "pushforward_determinant": verdict(max(pf.values()), 1e-10,
                                           "det Psi_* k = |det DPsi|^(2-n) det k",
                                           max(pf.values()) <= 1e-10, "<="),
        "moser_order": verdict(min(dr["ratios"]), 12.0, "fourth-order drift decay",
                               min(dr["ratios"]) >= 12.0, ">="),
        "dn_symmetry": verdict(dn["symmetry"], 1e-10, "symmetric boundary form",
                               dn["symmetry"] <= 1e-10, "<="),
        "dn_dense_oracle": verdict(dn["dense_gap"], 1e-8, "shell Schur = dense Schur",
                                   dn["dense_gap"] <= 1e-8, "<="),
        "scaling_law": verdict(max(dn["scaling_identity"], dn["scaling_diagonal"]), 1e-10,
                               "Lambda_{s g, l} = s Lambda_{g, l/s}",
                               max(dn["scaling_identity"], dn["scaling_diagonal"]) <= 1e-10, "<="),
        "seminorm_closed_forms": verdict(max(gv["constant_gap"], gv["linear_gap"]), 1e-12,
                                         "constant and affine seminorms",
                                         max(gv["constant_gap"], gv["linear_gap"]) <= 1e-12, "<="),
        "algebra": verdict(gv["algebra_holds"], gv["algebra_pairs"], "|fg| <= |f||g|",
                           gv["algebra_holds"] == gv["algebra_pairs"], "=="),
        "loss_constant": verdict(gv["loss_brute_gap"], 1e-12, "derivative-loss constant",
                                 gv["loss_brute_gap"] <= 1e-12 and abs(gv["loss_constant"] - 4.5) <= 1e-12,
                                 "<="),
    }
    return {"mode": "verify", "seed": seed, "round_trip": rt, "pushforward": pf, "drift": dr,
            "dn": dn, "gevrey": gv, "verdicts": v}
