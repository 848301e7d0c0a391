"""Command-line orchestration of both constructions and the identity suite.

    dnpairs fixedfreq --eps 0.02,0.04,0.08 --mesh 17,33 --out runs/ff
    dnpairs fixedpot  --eps 0.02,0.04,0.08
    dnpairs verify    --seed 0
    dnpairs dump      --mode fixedfreq --eps 0.05 --resolution 33 --out dumps

Each run writes ``report.json`` (deterministic under a fixed seed) and
``timings.json`` to the output directory. The exit code is 0 iff every
verdict in the report passed.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DnPairsError, ParseError
from .quadrature import ORACLE, QuadratureRule

MODES = ("fixedfreq", "fixedpot", "verify")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "fixedfreq"
    eps_list: tuple = (0.02, 0.04, 0.08)
    lambda0: float = -17.5
    q: float = 140.0
    sigma: float = 2.0
    tau: float = 0.5
    mesh_sizes: tuple = (17, 33)
    quad_nodes: int = 32
    seed: int = 0
    output_dir: str = "runs"
    potential: tuple = (1.0, 0.0, 0.0, 1.0)  # a1, a2, a3, b of V = a.x + b
    control_factor: float = 1.05

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode != "verify":
            if len(self.eps_list) == 0:
                raise ConfigError("eps_list is empty")
            for e in self.eps_list:
                if not 0.0 <= e <= 0.2:
                    raise ConfigError(f"eps {e} outside [0, 0.2]")
        if list(self.mesh_sizes) != sorted(self.mesh_sizes) or len(set(self.mesh_sizes)) != len(self.mesh_sizes):
            raise ConfigError("mesh sizes must be strictly ascending")
        if any(m < 9 for m in self.mesh_sizes):
            raise ConfigError("mesh sizes must be at least 9")
        if self.lambda0 == 0:
            raise ConfigError("lambda0 must be nonzero")
        if self.quad_nodes < 2:
            raise ConfigError("quad_nodes must be at least 2")
        if len(self.potential) != 4:
            raise ConfigError("potential needs four numbers a1, a2, a3, b")
        return self

    def to_json(self):
        d = asdict(self)
        d["eps_list"] = list(self.eps_list)
        d["mesh_sizes"] = list(self.mesh_sizes)
        d["potential"] = list(self.potential)
        return d


def _floats(s):
    s = s.strip()
    return tuple(float(v) for v in s.split(",") if v.strip()) if s else ()


_KEYS = {
    "mode": str, "eps": _floats, "eps_list": _floats, "lambda0": float, "q": float,
    "sigma": float, "tau": float, "mesh": lambda s: tuple(int(v) for v in _floats(s)),
    "mesh_sizes": lambda s: tuple(int(v) for v in _floats(s)), "quad": int, "quad_nodes": int,
    "seed": int, "out": str, "output_dir": str, "potential": _floats, "control_factor": float,
}
_ALIAS = {"eps": "eps_list", "mesh": "mesh_sizes", "quad": "quad_nodes", "out": "output_dir"}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cfg = base or RunConfig()
    updates = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {no}: expected 'key = value', got {raw.strip()!r}", no)
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ParseError(f"line {no}: unknown key {key!r}", no)
        try:
            updates[_ALIAS.get(key, key)] = _KEYS[key](val)
        except ValueError as exc:
            raise ParseError(f"line {no}: bad value for {key}: {exc}", no) from None
    return replace(cfg, **updates)


def load_config(path, base=None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


# ---------------------------------------------------------------------------
# report helpers
# ---------------------------------------------------------------------------

def verdict(measured, threshold, anchor, passed, relation=""):
    return {"measured": _clean(measured), "threshold": _clean(threshold), "anchor": anchor,
            "relation": relation, "passed": bool(passed)}


def _clean(v):
    """Plain JSON types; non-finite floats become strings so reports stay valid."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def all_passed(report) -> bool:
    return all(v["passed"] for v in report["verdicts"].values())


def write_report(report, timings, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(_clean(report), sort_keys=True, indent=2))
    (out / "timings.json").write_text(json.dumps(_clean(timings), sort_keys=True, indent=2))


def loglog_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def _freq_config(cfg: RunConfig):
    from .fixedfreq import FreqConfig, MomentConfig
    from .jacobian import JacobianConfig
    return FreqConfig(q=cfg.q, moment=MomentConfig(sigma=cfg.sigma),
                      jacobian=JacobianConfig(sigma=cfg.sigma, tau=cfg.tau),
                      quad=QuadratureRule(cfg.quad_nodes))


def run_fixedfreq(cfg: RunConfig, dn=True):
    """Build, certify and compare fixed-frequency pairs for every eps."""
    from .dnmap import control_compare, dn_compare, scaling_law_check, solution_correspondence, Mesh
    from .fixedfreq import build_pair, build_test_function, moment_oracle, nonisometry_certificate
    from .tensorfield import identity_matrix
    cfg.validate()
    gamma = identity_matrix()
    fc = _freq_config(cfg)
    timings = {}
    t0 = time.perf_counter()
    mf = build_test_function(gamma, fc.Q0, cfg.q, fc.moment)
    timings["moment"] = time.perf_counter() - t0
    oracle = moment_oracle(gamma, mf, fc.Q0, ORACLE)
    records = []
    for eps in sorted(cfg.eps_list):
        rec = {"eps": eps}
        t0 = time.perf_counter()
        try:
            if eps == 0:
                fcd = replace(fc, allow_degenerate=True)
                pair = build_pair(gamma, cfg.lambda0, 0.0, fcd, moment=mf)
                rec.update(degenerate=True, lambda_eps=pair.lambda_eps, s_eps=pair.s_eps)
                records.append(rec)
                continue
            pair = build_pair(gamma, cfg.lambda0, eps, fc, moment=mf)
            rec.update(lambda_eps=pair.lambda_eps, alpha=pair.alpha, s_eps=pair.s_eps,
                       certificates=pair.certificates)
            rec["nonisometry"] = nonisometry_certificate(pair, fc.quad)
            if dn:
                rec["dn"] = dn_compare(pair, cfg.mesh_sizes)
                rec["correspondence"] = [solution_correspondence(pair, Mesh(m)) for m in cfg.mesh_sizes]
        except DnPairsError as exc:
            rec["failure"] = f"{type(exc).__name__}: {exc}"
        timings[f"eps={eps:g}"] = time.perf_counter() - t0
        records.append(rec)
    extra = {}
    if dn:
        t0 = time.perf_counter()
        extra["control"] = control_compare(gamma, cfg.lambda0, cfg.mesh_sizes, cfg.control_factor)
        extra["scaling_law"] = scaling_law_check(gamma, cfg.lambda0, 2.0, Mesh(cfg.mesh_sizes[0]))
        timings["control"] = time.perf_counter() - t0
    report = {"mode": "fixedfreq", "config": cfg.to_json(), "moment": mf.to_json(),
              "moment_oracle": oracle, "records": records, **extra}
    report["verdicts"] = _freq_verdicts(report, cfg, dn)
    return report, timings


def _freq_verdicts(rep, cfg, dn):
    v = {}
    ok = [r for r in rep["records"] if "failure" not in r and not r.get("degenerate")]
    failed = [r for r in rep["records"] if "failure" in r]
    v["pipeline"] = verdict(len(failed), 0, "every eps entry completed", not failed, "==")
    o = rep["moment_oracle"]
    mres = max(abs(o["int_u"]), abs(o["int_uw"]), abs(o["l2_norm"] - 1))
    v["moments"] = verdict(mres, 1e-8, "two vanishing moments and unit norm", mres <= 1e-8, "<=")
    egap = abs(o["energy"] - cfg.q)
    v["energy"] = verdict(egap, 1e-6, "Dirichlet energy equals q", egap <= 1e-6, "<=")
    if not ok:
        return v
    jac = max(r["certificates"]["jacobian"]["max_det_residual"] for r in ok)
    v["jacobian"] = verdict(jac, 1e-5, "det DPsi = 1 + f", jac <= 1e-5, "<=")
    dev = max(abs(r["lambda_eps"] - cfg.lambda0) / abs(cfg.lambda0) for r in ok)
    v["frequency_proximity"] = verdict(dev, 0.5, "lambda_eps near lambda0", dev <= 0.5, "<=")
    if len(ok) >= 2:
        sl = loglog_slope([r["eps"] for r in ok], [abs(r["lambda_eps"] - cfg.lambda0) for r in ok])
        v["frequency_slope"] = verdict(sl, [0.9, 1.1], "lambda_eps - lambda0 = O(eps)",
                                       0.9 <= sl <= 1.1, "in")
    comp = max(r["certificates"]["compatibility_rel"] for r in ok)
    v["compatibility"] = verdict(comp, 1e-12, "conformal compatibility identity", comp <= 1e-12, "<=")
    signs = all(r["nonisometry"]["sign_agrees"] and r["nonisometry"]["nonzero"] for r in ok)
    v["nonisometry_sign"] = verdict([r["nonisometry"]["delta"] for r in ok], "sign of 3a(6a-1)",
                                    "determinant invariant separates the pair", signs, "sign")
    small = ok[0]["nonisometry"]["ratio"]
    v["nonisometry_ratio"] = verdict(small, [0.8, 1.2], "leading eps^2 term of the invariant gap",
                                     0.8 <= small <= 1.2, "in")
    if dn:
        dok = all(r["dn"]["decreasing"] for r in ok)
        v["dn_equality"] = verdict([r["dn"]["ratios"] for r in ok], 1.5,
                                   "DN distance vanishes under refinement", dok, ">=")
        ctl = rep["control"]
        v["dn_control"] = verdict(ctl["distances"], 1e-3, "unequal pair stays apart",
                                  ctl["stabilizes"], ">")
        cr = []
        for r in ok:
            res = [c["residual"] for c in r["correspondence"]]
            cr.append([res[k] / res[k + 1] for k in range(len(res) - 1)])
        cok = all(x >= 1.5 for row in cr for x in row) and all(len(row) for row in cr)
        v["correspondence"] = verdict(cr, 1.5, "w = (c v) o Psi^-1 solves the pushed equation",
                                      cok, ">=")
        margins = [min(m["margin_1"], m["margin_2"]) for r in ok for m in r["dn"]["meshes"]]
        v["spectral_margin"] = verdict(min(margins), 0.0, "shift below the Dirichlet spectrum",
                                       min(margins) > 0, ">")
        sym = max(m["symmetry"] for r in ok for m in r["dn"]["meshes"])
        v["dn_symmetry"] = verdict(sym, 1e-10, "symmetric boundary form", sym <= 1e-10, "<=")
        v["scaling_law"] = verdict(rep["scaling_law"], 1e-10, "Lambda_{s g, l} = s Lambda_{g, l/s}",
                                   rep["scaling_law"] <= 1e-10, "<=")
    return v


def _potential(cfg):
    from .tensorfield import Affine
    a = np.asarray(cfg.potential[:3], dtype=float)
    return Affine(a, cfg.potential[3])


def run_fixedpot(cfg: RunConfig, dn=True):
    """Build, certify and compare fixed-potential pairs for every eps."""
    from .dnmap import dn_compare
    from .fixedpot import PotConfig, build_pair_fp, effective_potential_perturbation, volume_certificate
    from .tensorfield import identity_matrix
    cfg.validate()
    g = identity_matrix()
    V = _potential(cfg)
    pc = PotConfig(quad=QuadratureRule(cfg.quad_nodes))
    records, timings = [], {}
    for eps in sorted(cfg.eps_list):
        rec = {"eps": eps}
        t0 = time.perf_counter()
        try:
            if eps == 0:
                pair = build_pair_fp(g, V, 0.0, replace(pc, allow_degenerate=True))
                rec["degenerate"] = True
                rec["volume"] = volume_certificate(pair, pc.quad)
                records.append(rec)
                continue
            pair = build_pair_fp(g, V, eps, pc)
            rec["certificates"] = pair.certificates
            rec["submersion"] = pair.submersion.to_json()
            rec["volume"] = volume_certificate(pair, pc.quad)
            rec["perturbation"] = effective_potential_perturbation(pair.T_eps, V, pc.Q0.lattice(21))
            if dn:
                rec["dn"] = dn_compare(pair, cfg.mesh_sizes)
        except DnPairsError as exc:
            rec["failure"] = f"{type(exc).__name__}: {exc}"
        timings[f"eps={eps:g}"] = time.perf_counter() - t0
        records.append(rec)
    report = {"mode": "fixedpot", "config": cfg.to_json(), "records": records}
    report["verdicts"] = _pot_verdicts(report, dn)
    return report, timings


def _pot_verdicts(rep, dn):
    v = {}
    ok = [r for r in rep["records"] if "failure" not in r and not r.get("degenerate")]
    failed = [r for r in rep["records"] if "failure" in r]
    v["pipeline"] = verdict(len(failed), 0, "every eps entry completed", not failed, "==")
    if not ok:
        return v
    comp = max(r["certificates"]["compatibility_residual"] for r in ok)
    v["compatibility"] = verdict(comp, 1e-10, "V o Psi = T", comp <= 1e-10, "<=")
    gap = max(r["volume"]["vol_gap_g1"] for r in ok)
    v["volume_g1"] = verdict(gap, 1e-6, "Vol(g1) = Vol(g)", gap <= 1e-6, "<=")
    pos = all(r["volume"]["positive"] for r in ok)
    mis = max(r["volume"]["surplus_mismatch"] for r in ok)
    v["volume_g2"] = verdict(mis, 1e-8, "Vol(g2) - Vol(g) = int (c^6 - 1) > 0", pos and mis <= 1e-8, "<=")
    pert = [r["perturbation"] for r in ok]
    v["potential_changed"] = verdict(pert, 0.0, "T differs from V", all(p > 0 for p in pert), ">")
    if len(ok) >= 2:
        sl = loglog_slope([r["eps"] for r in ok], pert)
        v["potential_linear"] = verdict(sl, [0.9, 1.1], "sup |T - V| linear in eps", 0.9 <= sl <= 1.1, "in")
    if dn:
        dok = all(r["dn"]["decreasing"] for r in ok)
        v["dn_equality"] = verdict([r["dn"]["ratios"] for r in ok], 1.5,
                                   "DN distance vanishes under refinement", dok, ">=")
        margins = [min(m["margin_1"], m["margin_2"]) for r in ok for m in r["dn"]["meshes"]]
        v["spectral_margin"] = verdict(min(margins), 0.0, "zero below the Dirichlet spectrum",
                                       min(margins) > 0, ">")
    return v


def verify(cfg: RunConfig):
    """Exact-identity suite; no PDE solves beyond m = 9."""
    from .suite import identity_suite
    report = identity_suite(cfg.seed)
    report["config"] = cfg.to_json()
    return report, {}


# ---------------------------------------------------------------------------
# field dumps
# ---------------------------------------------------------------------------

def dump_fields(pair, grid_resolution, output_dir, force=False):
    """CSV lattices of the scalar fields, det DPsi and both coefficients."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    r = int(grid_resolution)
    ax = np.linspace(0.0, 1.0, r)
    G = np.meshgrid(ax, ax, ax, indexing="ij")
    X = np.stack([g.ravel() for g in G], axis=1)
    if hasattr(pair, "gamma1"):
        mode, second = "fixedfreq", ("f_eps", pair.f_eps)
        mats = (("gamma1", pair.gamma1), ("gamma2", pair.gamma2))
    else:
        mode, second = "fixedpot", ("T_eps", pair.T_eps)
        mats = (("g1", pair.g1), ("g2", pair.g2))
    psi = pair.Psi.with_polish(0) if hasattr(pair.Psi, "with_polish") else pair.Psi
    items = [("c_eps", pair.c_eps.eval(X)[:, None], ["c"]),
             (second[0], second[1].eval(X)[:, None] if second[1] is not None else np.zeros((len(X), 1)),
              [second[0].split("_")[0]]),
             ("detDPsi", np.linalg.det(psi.jac(X))[:, None], ["det"])]
    iu = np.triu_indices(3)
    for name, A in mats:
        vals = A.eval(X)[:, iu[0], iu[1]]
        items.append((name, vals, [f"a{i + 1}{j + 1}" for i, j in zip(*iu)]))
    files = []
    for name, vals, cols in items:
        path = out / f"{mode}_eps{pair.eps:g}_r{r}_{name}.csv"
        if path.exists() and not force:
            raise FileExistsError(f"{path} exists; pass --force to overwrite")
        data = np.column_stack([X, vals])
        np.savetxt(path, data, delimiter=",", fmt="%.17g", header=",".join(["x1", "x2", "x3"] + cols),
                   comments="")
        files.append(str(path))
    return files


def read_dump(path):
    return np.loadtxt(path, delimiter=",", skiprows=1)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="dnpairs", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("fixedfreq", "fixedpot", "verify", "dump"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value file")
        s.add_argument("--eps", help="comma-separated eps values")
        s.add_argument("--lambda0", type=float)
        s.add_argument("--q", type=float)
        s.add_argument("--sigma", type=float)
        s.add_argument("--tau", type=float)
        s.add_argument("--mesh", help="comma-separated nodes per axis")
        s.add_argument("--quad", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--force", action="store_true")
        s.add_argument("--no-dn", action="store_true", help="skip DN solves")
        if name == "dump":
            s.add_argument("--mode", choices=("fixedfreq", "fixedpot"), default="fixedfreq")
            s.add_argument("--resolution", type=int, default=33)
    return p


def config_from_args(args) -> RunConfig:
    cfg = RunConfig(mode=args.command if args.command in MODES else getattr(args, "mode", "fixedfreq"))
    if args.config:
        cfg = load_config(args.config, cfg)
    upd = {}
    if args.eps is not None:
        upd["eps_list"] = _floats(args.eps)
    if args.mesh is not None:
        upd["mesh_sizes"] = tuple(int(v) for v in _floats(args.mesh))
    for k, name in (("lambda0", "lambda0"), ("q", "q"), ("sigma", "sigma"), ("tau", "tau"),
                    ("quad", "quad_nodes"), ("seed", "seed"), ("out", "output_dir")):
        if getattr(args, k) is not None:
            upd[name] = getattr(args, k)
    return replace(cfg, **upd).validate()


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        out = Path(cfg.output_dir)
        if args.command == "dump":
            eps = cfg.eps_list[0]
            if cfg.mode == "fixedpot":
                from .fixedpot import build_pair_fp
                from .tensorfield import identity_matrix
                pair = build_pair_fp(identity_matrix(), _potential(cfg), eps)
            else:
                from .fixedfreq import build_pair
                from .tensorfield import identity_matrix
                pair = build_pair(identity_matrix(), cfg.lambda0, eps, _freq_config(cfg))
            for f in dump_fields(pair, args.resolution, out, args.force):
                print(f)
            return 0
        if (out / "report.json").exists() and not args.force:
            raise FileExistsError(f"{out / 'report.json'} exists; pass --force to overwrite")
        if args.command == "fixedfreq":
            report, timings = run_fixedfreq(cfg, dn=not args.no_dn)
        elif args.command == "fixedpot":
            report, timings = run_fixedpot(cfg, dn=not args.no_dn)
        else:
            report, timings = verify(cfg)
        write_report(report, timings, out)
    except (DnPairsError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, v in sorted(report["verdicts"].items()):
        print(f"{'PASS' if v['passed'] else 'FAIL'}  {name}: {v['measured']} ({v['relation']} {v['threshold']})")
    return 0 if all_passed(report) else 1


if __name__ == "__main__":
    sys.exit(main())
