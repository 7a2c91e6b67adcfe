"""Seeded single-trial experiments; each returns one flat row (a dict).

The CLI maps these over per-trial seeds; the acceptance suite calls them
directly.  A trial depends only on its seed and the configuration.
"""
from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import czop, desk
from .calibration import constant, lemma_setup, necessity_setup
from .config import ExperimentConfig
from .grid import (DyadicCube, SurgeryResolutionError, badness_probability, five_core_inside,
                   i_bad_superset, random_grid, surgery, surgery_pair)
from .haar import HaarBasis
from .journe import (JourneError, journe_data, parse_weight, random_omega, verify_all_claims,
                     verify_journe)
from .measure import AtomicMeasure, generate_measure
from .paraproduct import (OneParamParaproduct, full_bound_check, mixed_duality_check)
from .spaces import OmegaSet, RectangleFamily, bmo_norm, bmo_prod_estimate, h1_bmo_duality_check


class ExperimentError(ValueError):
    pass


def _rng(seed):
    return np.random.default_rng(seed)


def _draw(rng):
    return int(rng.integers(2 ** 31))


def _kind_measure(kind, seed, cfg: ExperimentConfig, dim: int):
    if dim == 1 and not cfg.L:
        return desk.measure(kind, seed, cfg.N)
    kw = {"zero_prob": 0.2} if kind in ("random_iid", "random_int") else {}
    if kind == "point_masses":
        kw = {"masses": [(tuple([1] * dim), 1000)], "background": 1}
    return generate_measure(kind, seed, cfg.N, cfg.L, dim, **kw)


def _measure(cfg: ExperimentConfig, axis: int, seed):
    return _kind_measure(cfg.measures[axis % len(cfg.measures)], seed, cfg, cfg.dims[axis])


def _psys(cfg: ExperimentConfig, rng):
    mu1, mu2 = _measure(cfg, 0, _draw(rng)), _measure(cfg, 1, _draw(rng))
    return desk.product_system(mu1, mu2, _draw(rng), cfg.r, cfg.gamma_value, cfg.bad_const)


def _one_dim(cfg):
    if cfg.dims != (1, 1) or cfg.L:
        raise ExperimentError("this command supports dims (1, 1) with L = 0")


# -- measures and Haar ---------------------------------------------------------


def gen_measure(cfg: ExperimentConfig, kind: str | None = None, seed=None, **params) -> AtomicMeasure:
    kind = kind or cfg.measures[0]
    if cfg.dims[0] == 1 and not cfg.L and not params:
        return desk.measure(kind, seed, cfg.N)
    return generate_measure(kind, seed, cfg.N, cfg.L, cfg.dims[0], **params)


def haar_trial(seed, cfg: ExperimentConfig, mu: AtomicMeasure | None = None,
               kind: str | None = None) -> dict:
    """Orthonormality, cancellation and full-depth round trip."""
    rng = _rng(seed)
    kinds = desk.MEASURE_KINDS
    pick = kinds[int(rng.integers(len(kinds)))]
    kind = "file" if mu is not None else (kind or pick)
    if mu is None:
        mu = _kind_measure(kind, _draw(rng), cfg, cfg.dims[0])
    grid = random_grid(mu.dim, _draw(rng), mu.depth)
    b = HaarBasis(mu, grid)
    G = b.gram()
    nz = b.nonzero
    E = G[np.ix_(nz, nz)] - np.eye(int(nz.sum()))
    off = float(np.abs(G[~nz]).max()) if (~nz).any() else 0.0
    canc = float(np.abs(b.HW[b.eta != 0].sum(axis=1)).max()) if (b.eta != 0).any() else 0.0
    pos = mu.flat > 0
    f = rng.standard_normal(mu.n_atoms) * pos
    # functions are only determined on atoms of positive mass
    rec = float(np.abs(b.reconstruct(b.coefficients(f)) - f)[pos].max()) if pos.any() else 0.0
    ortho = float(np.abs(E).max()) if E.size else 0.0
    return {"kind": kind, "n_funcs": int(len(b.eta)), "n_zero": int((~nz).sum()),
            "ortho_err": ortho, "zero_err": off, "cancel_err": canc, "recon_err": rec,
            "pass": bool(ortho <= 1e-10 and off == 0 and rec <= 1e-10 and canc <= 1e-12)}


# -- grids -------------------------------------------------------------------------


def badness_row(r: int, cfg: ExperimentConfig, gen: int, trials: int, seed, const=None) -> dict:
    const = cfg.bad_const if const is None else const
    est = badness_probability(gen, r, cfg.gamma_value, trials, seed, cfg.depth, cfg.dims[0], const)
    return {"gen": gen, "r": r, "const": const, "trials": trials, "bad": est.bad,
            "p": est.p, "ci_lo": est.lo, "ci_hi": est.hi}


def _fraction(x) -> Fraction:
    return Fraction(x).limit_denominator(1 << 20)


def surgery_trial(seed, cfg: ExperimentConfig, theta="1/4", offset: int = 18, max_gen: int = 2):
    """One random (I1, I2, theta, aux) draw: exactness, collar containment, 5L test."""
    rng = _rng(seed)
    th = _fraction(theta)
    dim, depth = cfg.dims[0], cfg.depth
    D, Dp, aux = (random_grid(dim, _draw(rng), depth) for _ in range(3))
    for _ in range(100):
        g1 = int(rng.integers(0, max_gen + 1))
        g2 = int(rng.integers(0, g1 + 1))
        I1 = D.cubes(g1)[int(rng.integers(D.n_cubes(g1)))]
        # I2 near I1 so that overlaps and adjacency are common
        pt = np.clip(I1.lo + rng.integers(-I1.side, 2 * I1.side, size=dim), 0, D.box - 1)
        I2 = Dp.cube_of(pt, g2)
        if len(I1.atoms(D.box)) == 0:
            continue
        try:
            part = surgery(I1, I2, th, aux, offset)
            p1, p2, common = surgery_pair(I1, I2, th, aux, offset)
            bad = i_bad_superset(I1, th, Dp, aux, cfg.r, offset)
            bad_half = i_bad_superset(I1, th / 2, Dp, aux, cfg.r, offset)
        except SurgeryResolutionError:
            continue
        break
    else:
        raise ExperimentError("no admissible surgery draw; lower max_gen or raise offset")
    atoms = I1.atoms(D.box)
    parts = [part.sep, part.boundary, part.delta]
    allp = np.concatenate(parts)
    exact = len(allp) == len(atoms) and np.array_equal(np.sort(allp), np.sort(atoms))
    delta_ok = all(np.all(I2.contains_points(np.stack(np.unravel_index(p[0], (D.box,) * dim), -1)))
                   for p in part.delta_pieces)
    five = all(five_core_inside(g, th, I1, I2) for g in common)
    w = _measure(cfg, 0, _draw(rng)).flat
    m1 = float(w[atoms].sum())
    return {"g1": g1, "g2": g2, "theta": str(th), "offset": offset, "n_atoms": int(len(atoms)),
            "exact": bool(exact), "delta_in_I2": bool(delta_ok),
            "boundary_in_bad": bool(np.isin(part.boundary, bad).all()),
            "n_common": len(common), "five_ok": bool(five),
            "bad_ratio": float(w[bad].sum()) / m1 if m1 > 0 else 0.0,
            "bad_ratio_half": float(w[bad_half].sum()) / m1 if m1 > 0 else 0.0}


# -- spaces ---------------------------------------------------------------------------


def bmo_trial(seed, cfg: ExperimentConfig) -> dict:
    rng = _rng(seed)
    psys = _psys(cfg, rng)
    b = rng.standard_normal(psys.shape)
    row = {}
    for fam in ("single_rects", "greedy"):
        row[fam] = bmo_prod_estimate(b, psys, fam).value
    row["random_unions"] = bmo_prod_estimate(b, psys, "random_unions", k=4, trials=20,
                                             seed=_draw(rng)).value
    row["level_sets"] = bmo_prod_estimate(b, psys, "level_sets", u=np.abs(b)).value
    row["best"] = max(row.values())
    return row


def duality_trial(seed, cfg: ExperimentConfig, C_dual: float | None = None) -> dict:
    rng = _rng(seed)
    psys = _psys(cfg, rng)
    b = rng.standard_normal(psys.shape)
    C = desk.random_window_coefficients(psys, _draw(rng))
    rep = h1_bmo_duality_check(b, C, psys)
    C_dual = constant("C_dual") if C_dual is None else C_dual
    chain_ok = all(rep.chain[k] <= 1e-9 for k in ("cs_step", "half_mass", "square_sum",
                                                   "sup_bound", "layer_sum_bound"))
    return {"pairing": rep.pairing, "s_norm_1": rep.s_norm_1, "L_tilde": rep.L_tilde,
            "ratio": rep.ratio, "C_dual": C_dual, "chain_ok": bool(chain_ok),
            "tilde_growth": rep.chain["tilde_growth"],
            "pass": bool(rep.ratio <= C_dual and chain_ok)}


# -- paraproducts -----------------------------------------------------------------------


def paraproduct_trial(seed, cfg: ExperimentConfig, kind: str = "full") -> dict:
    rng = _rng(seed)
    psys = _psys(cfg, rng)
    b = rng.standard_normal(psys.shape)
    u = rng.standard_normal(psys.shape)
    if kind == "full":
        rep = full_bound_check(b, u, psys)
        return {"kind": kind, "norm_out": rep.norm_out, "bound": rep.bound, "ratio": rep.ratio,
                "orth_residual": rep.orth_residual,
                "pass": bool(rep.ratio <= 1 + 1e-9 and rep.orth_residual <= 1e-10)}
    if kind == "mixed":
        v = rng.standard_normal(psys.shape)
        rep = mixed_duality_check(b, u, v, psys)
        den = rep["L_tilde"] * rep["norm_u"] * rep["norm_v"]
        ratio = abs(rep["pairing_direct"]) / den if den > 0 else 0.0
        ok = (abs(rep["pairing_direct"] - rep["pairing_via_b"]) <= 1e-9 * max(1, den)
              and rep["pointwise_slack"] <= 1e-9 and rep["cs_bound"] <= rep["maximal_bound"])
        return {"kind": kind, "norm_out": abs(rep["pairing_direct"]), "bound": den,
                "ratio": ratio, "orth_residual": 0.0, "pass": bool(ok)}
    if kind == "one":
        sys = psys.sys_2
        a = rng.standard_normal(sys.mu.n_atoms)
        op = OneParamParaproduct(a, sys)
        nrm = op.norm(tol=1e-8)
        cubes = list(sys.grid.all_cubes) + list(sys.other.all_cubes)
        bmo = bmo_norm(a, sys.mu, 2, 2.0, cubes)["value"]
        return {"kind": kind, "norm_out": nrm, "bound": bmo,
                "ratio": nrm / bmo if bmo > 0 else 0.0, "orth_residual": 0.0, "pass": True}
    raise ExperimentError(f"unknown paraproduct kind {kind!r}")


# -- Journe -----------------------------------------------------------------------------------


def load_omega_file(path):
    """{mu_1, mu_2, grid_1, grid_2, omegas: [{rects: [[gen1, corner1, gen2, corner2], ...]}]}."""
    from .grid import ShiftedDyadicGrid
    d = json.loads(Path(path).read_text())
    try:
        mu1, mu2 = AtomicMeasure.from_dict(d["mu_1"]), AtomicMeasure.from_dict(d["mu_2"])
        g1, g2 = ShiftedDyadicGrid.from_dict(d["grid_1"]), ShiftedDyadicGrid.from_dict(d["grid_2"])
        fam = RectangleFamily(g1, g2, mu1, mu2)
        omegas = []
        for om in d["omegas"]:
            rects = []
            for gen1, c1, gen2, c2 in om["rects"]:
                a = g1.gid(DyadicCube(gen1, tuple(np.atleast_1d(c1).tolist()), g1.side(gen1)))
                b = g2.gid(DyadicCube(gen2, tuple(np.atleast_1d(c2).tolist()), g2.side(gen2)))
                if a < 0 or b < 0:
                    raise ExperimentError("rectangle misses the box")
                rects.append((a, b))
            omegas.append(OmegaSet.from_rects(fam, rects))
    except KeyError as exc:
        raise ExperimentError(f"omega file missing field {exc}") from None
    return fam, omegas


def journe_family(seed, cfg: ExperimentConfig) -> RectangleFamily:
    rng = _rng(seed)
    mu1, mu2 = _measure(cfg, 0, _draw(rng)), _measure(cfg, 1, _draw(rng))
    g1, g2 = random_grid(mu1.dim, _draw(rng), mu1.depth), random_grid(mu2.dim, _draw(rng), mu2.depth)
    return RectangleFamily(g1, g2, mu1, mu2)


def journe_row(omega: OmegaSet, fam: RectangleFamily, weights, claims: bool = True) -> dict:
    if not omega.mask.any():
        raise JourneError("empty Omega")
    data = journe_data(omega, fam)
    row = {"n_rects": len(omega.rects), "omega_mass": float(data.omega_mass),
           "n_maximal": len(data.rects)}
    ok = True
    for name, fn in weights:
        rep = verify_journe(omega, fn, fam, data=data)
        row[f"lhs[{name}]"] = float(rep.lhs)
        row[f"rhs[{name}]"] = float(rep.rhs)
        row[f"pass[{name}]"] = rep.passed
        ok &= rep.passed
    if claims:
        cl = verify_all_claims(omega, fam, data=data)
        row["claims_ok"] = all(c.disjoint and c.half_mass for c in cl)
        ok &= row["claims_ok"]
    row["pass"] = bool(ok)
    return row


def journe_trial(seed, cfg: ExperimentConfig, weights=("geometric:0.5", "inverse_square"),
                 fam=None, max_rects: int = 8) -> dict:
    rng = _rng(seed)
    fam = journe_family(_draw(rng), cfg) if fam is None else fam
    omega = random_omega(fam, rng, max_rects=max_rects, min_gen=1)
    while not omega.mask.any():
        omega = random_omega(fam, rng, max_rects=max_rects, min_gen=1)
    return journe_row(omega, fam, [(w, parse_weight(w)) for w in weights])


# -- operators ----------------------------------------------------------------------------------


def separated_trial(seed, cfg: ExperimentConfig, quadruples: int = 30) -> dict:
    _one_dim(cfg)
    T, psys, bb1, bb2 = lemma_setup(seed, cfg.N)
    rep = czop.separated_lemma_check(T, psys.sys_1, psys.sys_2, bb1, bb2, desk.DESK["alpha"],
                                     desk.DESK["beta"], n=quadruples, seed=seed)
    row = {}
    ok = True
    for k, v in rep.items():
        C = constant(f"C_ccss_{k}")
        row[f"worst[{k}]"] = v.worst
        row[f"n[{k}]"] = len(v.ratios)
        row[f"C[{k}]"] = C
        ok &= v.worst <= C
    row["pass"] = bool(ok)
    return row


def random_cube_pairs(psys, rng, n: int, min_gen: int = 1):
    g1, g2 = psys.sys_1.grid, psys.sys_2.grid
    out = []
    for _ in range(n):
        a = int(rng.integers(min_gen, g1.depth + 1))
        b = int(rng.integers(min_gen, g2.depth + 1))
        out.append((g1.cubes(a)[int(rng.integers(g1.n_cubes(a)))],
                    g2.cubes(b)[int(rng.integers(g2.n_cubes(b)))]))
    return out


def testing_trial(seed, cfg: ExperimentConfig, n_cubes: int = 20) -> list[dict]:
    _one_dim(cfg)
    rng = _rng(seed)
    psys = _psys(cfg, rng)
    mu1, mu2 = psys.sys_1.mu, psys.sys_2.mu
    H = czop.HaarMultiplier.random(psys, _draw(rng))
    K = desk.tensor_kernel(mu1, mu2)
    ops = {"multiplier": H, "kernel_pv": K, "composite": czop.Composite([H, K])}
    cubes = random_cube_pairs(psys, rng, n_cubes)
    rows = []
    for name, T in ops.items():
        rep = czop.testing_conditions(T, mu1, mu2, cubes, seed=_draw(rng))
        rows.append({"operator": name, "norm_bound": T.norm_bound(), "wbp": rep["wbp"],
                     "bmo_1": rep["bmo_1"], "bmo_2": rep["bmo_2"], "diagonal": rep["diagonal"],
                     "skipped": rep["skipped"], "pv_convention": name != "multiplier"})
    return rows


def t1_trial(seed, cfg: ExperimentConfig, n_b: int = 1) -> dict:
    _one_dim(cfg)
    T, psys = necessity_setup(seed, cfg.N)
    rng = _rng(seed)
    bs = [desk.random_sign_function(psys.shape, _draw(rng)) for _ in range(n_b)]
    C = constant("C_nec")
    rep = czop.tb_necessity_experiment(T, bs, psys, constant=C)
    t1 = bmo_prod_estimate(czop.apply_T1(T), psys, ["single_rects", "greedy"]).value
    return {"worst": rep.worst, "C_nec": C, "T1_estimate": t1, "structure_ok": rep.structure_ok,
            "pass": bool(rep.passed and rep.structure_ok)}
