"""Subcommand runners and their CSV / JSON writers.

Each runner fans its independent cells out to a process pool (or runs them
inline for one worker) and writes results in cell order, so the bytes on disk
do not depend on the worker count.  Every file carries a provenance block:
config hash, seed list and package version.  No timestamps are written.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .config import Context, ExperimentConfig
from .drift import omega, omega_defect
from .dynamics import prop1_rate, prop2_rate
from .stabilization import run_stabilization
from .viability import (
    appendix_initial_estimate,
    construct_eps_approx,
    near_viability_gap,
    report_passed,
    tangency_profile,
    validate_eps_approx,
)


# -- writers ---------------------------------------------------------------------


def provenance(cfg: ExperimentConfig, subcommand: str) -> dict:
    return {"config_sha256": cfg.digest(), "seeds": list(cfg.seeds), "version": __version__,
            "subcommand": subcommand}


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence], prov: dict) -> Path:
    buf = io.StringIO()
    for key in ("config_sha256", "seeds", "version", "subcommand"):
        buf.write(f"# {key}: {json.dumps(prov[key])}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if v is None or isinstance(v, str):
        return v
    return str(v)


def write_json(path: Path, payload: dict, prov: dict) -> Path:
    doc = {"provenance": prov, **payload}
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


# -- pool plumbing ---------------------------------------------------------------


@lru_cache(maxsize=4)
def _context(cfg_json: str) -> Context:
    return Context(ExperimentConfig.model_validate_json(cfg_json))


def _fan_out(fn: Callable, cfg: ExperimentConfig, cells: list, workers: int) -> list:
    payload = cfg.model_dump_json()
    if workers <= 1 or len(cells) <= 1:
        return [fn(payload, cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [payload] * len(cells), cells))


# -- validate-operators ----------------------------------------------------------


def _check(name: str, measured: float, tol: float, *, at_least: bool = False) -> dict:
    ok = measured >= tol if at_least else measured <= tol
    return {"check": name, "measured": float(measured), "tolerance": float(tol), "passed": bool(ok)}


def operator_checks(ctx: Context, n_fields: int = 100, seed: int = 0) -> list[dict]:
    from .drift import build_drift

    g, G, b = ctx.grid_x, ctx.system.group_x, ctx.drift_x
    rng = np.random.default_rng(seed)
    mat = g.matrix.toarray()
    evals, evecs = np.linalg.eigh(mat)
    out = []
    ref = np.sort(g.eigenvalues.ravel())
    out.append(_check("eigenvalues match dense eigendecomposition (rel)",
                      np.max(np.abs(ref - evals) / evals), 1e-10))
    n = g.n_per_dim
    E = np.stack([g.eigenvector(j, k) for j in range(1, n + 1) for k in range(1, n + 1)], axis=1)
    out.append(_check("eigenvectors L2-orthonormal", np.max(np.abs(g.h**2 * E.T @ E - np.eye(g.dim))), 1e-10))
    phi = rng.standard_normal((n_fields, g.dim))
    psi = rng.standard_normal((n_fields, g.dim))
    out.append(_check("laplacian_apply matches dense product (rel)",
                      np.max(np.abs(g.laplacian_apply(phi) - phi @ mat.T)) / np.max(np.abs(phi @ mat.T)), 1e-12))
    sol = g.laplacian_solve(phi)
    out.append(_check("laplacian_solve residual (rel)",
                      np.max(np.linalg.norm(sol @ mat.T - phi, axis=1) / np.linalg.norm(phi, axis=1)), 1e-10))
    pars = np.sum(g.hminus1_basis_coefficients(phi) ** 2, axis=-1)
    out.append(_check("H^-1 Parseval over the sqrt(lambda) e basis (rel)",
                      np.max(np.abs(pars - g.norm_sq(phi)) / g.norm_sq(phi)), 1e-10))
    norms = g.norm_sq(phi)
    out.append(_check("norm chain ||phi||^2_H-1 <= ||phi||^2_L2 / lambda_min",
                      np.max(norms - g.norm_sq(phi, "L2") / g.lambda_min), 1e-12))
    out.append(_check("boundary normal of b", np.max(np.abs(b.boundary_normal())), 0.0))
    div_coarse = np.max(np.abs(b.divergence()))
    fine = type(g)(2 * n + 1)
    div_fine = np.max(np.abs(build_drift(fine, b.stream).divergence()))
    if div_coarse <= 1e-12:
        order = math.inf
    else:
        order = math.log(div_coarse / max(div_fine, 1e-300)) / math.log(g.h / fine.h)
    out.append(_check("divergence of b decays at second order under refinement", min(order, 99.0), 1.8,
                      at_least=True))
    skew = np.abs(g.inner(G.generator_apply(phi), phi, "Hminus1")) / norms
    out.append(_check("skew form <B phi, phi>_H-1 / ||phi||^2", np.max(skew), 1e-10))
    iso, adj = 0.0, 0.0
    for s in (0.1, -0.1, 1.0, -1.0, 5.0, -5.0):
        moved = G.apply(s, phi)
        iso = max(iso, np.max(np.abs(np.sqrt(g.norm_sq(moved)) - np.sqrt(norms))))
        lhs = g.inner(moved, psi, "Hminus1")
        rhs = g.inner(phi, G.apply(-s, psi), "Hminus1")
        adj = max(adj, np.max(np.abs(lhs - rhs)))
    out.append(_check("isometry of e^{sB} in H^-1", iso, 1e-9))
    out.append(_check("adjoint law <e^{sB} phi, psi> = <phi, e^{-sB} psi>", adj, 1e-9))
    grp = np.max(np.abs(G.apply(0.7, phi) - G.apply(0.3, G.apply(0.4, phi)))) / np.max(np.abs(phi))
    out.append(_check("group property e^{(s+r)B} = e^{sB} e^{rB}", grp, 1e-9))
    # dense oracle: ||B||_{H^-1 -> L2} = sigma_max(B A^{1/2}) in nodal coordinates
    bmat = G.generator_apply(np.eye(g.dim)).T
    sqrt_a = (evecs * np.sqrt(evals)) @ evecs.T
    oracle = np.linalg.norm(bmat @ sqrt_a, 2)
    rel = abs(oracle - G.op_norm) / max(oracle, 1e-300) if oracle > 0 else G.op_norm
    out.append(_check("operator norm H^-1 -> L2 matches dense SVD (rel)", rel, 1e-8))
    out.append(_check("omega(0) = 0", abs(omega(0.0)), 0.0))
    return out


def run_validate_operators(ctx: Context, out: Path, workers: int) -> tuple[bool, list[Path]]:
    prov = provenance(ctx.cfg, "validate-operators")
    checks = operator_checks(ctx, seed=ctx.cfg.seeds[0])
    ok = all(c["passed"] for c in checks)
    paths = [
        write_csv(out / "operators.csv", ["check", "measured", "tolerance", "passed"],
                  [[c["check"], c["measured"], c["tolerance"], c["passed"]] for c in checks], prov),
        write_json(out / "operators.json", {"passed": ok, "checks": checks,
                                            "failing": [c["check"] for c in checks if not c["passed"]]}, prov),
    ]
    return ok, paths


# -- rates -----------------------------------------------------------------------


def _rates_cell(cfg_json: str, seed: int):
    ctx = _context(cfg_json)
    c = ctx.cfg
    p1 = prop1_rate(ctx.model, ctx.system, ctx.xi, ctx.eta, c.t0, c.epsilons, c.n_mc, seed,
                    dt=None if c.dt == "auto" else float(c.dt))
    p2 = prop2_rate(ctx.model, ctx.system, ctx.xi, ctx.eta, c.t0, c.epsilons, c.n_mc, seed,
                    dt=None if c.dt == "auto" else float(c.dt), refine=c.refine)
    return seed, p1, p2


def _rate_summary(r) -> dict:
    s = r.summary()
    for key in ("slope", "intercept"):
        if s[key] is None:
            s[key] = "NA"
    return s


def run_rates(ctx: Context, out: Path, workers: int) -> tuple[bool, list[Path]]:
    prov = provenance(ctx.cfg, "rates")
    results = _fan_out(_rates_cell, ctx.cfg, list(ctx.cfg.seeds), workers)
    paths, summary = [], []
    for seed, p1, p2 in results:
        for rep in (p1, p2):
            rows = zip(rep.epsilons, rep.errors, rep.stderr)
            paths.append(write_csv(out / f"rates_{rep.label}_seed{seed}.csv",
                                   ["epsilon", "error", "stderr"], rows, prov))
            summary.append({"seed": seed, **_rate_summary(rep)})
    paths.append(write_json(out / "rates_summary.json", {"reports": summary}, prov))
    return True, paths


# -- tangency --------------------------------------------------------------------


def _tangency_cell(cfg_json: str, seed: int):
    ctx = _context(cfg_json)
    c = ctx.cfg
    return seed, tangency_profile(ctx.constraint, ctx.model, c.t0, ctx.xi, ctx.eta, c.epsilons,
                                  c.n_mc, seed, dt=None if c.dt == "auto" else float(c.dt))


def run_tangency(ctx: Context, out: Path, workers: int) -> tuple[bool, list[Path]]:
    prov = provenance(ctx.cfg, "tangency")
    paths, summary = [], []
    nctrl = len(ctx.controls)
    for seed, prof in _fan_out(_tangency_cell, ctx.cfg, list(ctx.cfg.seeds), workers):
        rows = [[e, q, b, *qs] for e, q, b, qs in zip(prof.epsilons, prof.q, prof.best_control, prof.q_by_control)]
        paths.append(write_csv(out / f"tangency_seed{seed}.csv",
                               ["epsilon", "Q", "argmin_control"] + [f"Q_u{i}" for i in range(nctrl)], rows, prov))
        summary.append({"seed": seed, "extrapolated": prof.extrapolated, "n_mc": prof.n_mc})
    paths.append(write_json(out / "tangency_summary.json", {"profiles": summary}, prov))
    return True, paths


# -- approx-solve ----------------------------------------------------------------


def _approx_cell(cfg_json: str, cell: tuple):
    seed, eps = cell
    ctx = _context(cfg_json)
    c = ctx.cfg
    dt = None if c.dt == "auto" else float(c.dt)
    rec = construct_eps_approx(ctx.constraint, ctx.model, c.t0, c.t0 + c.T, ctx.xi, ctx.eta, eps,
                               c.n_mc, seed, dt)
    report = validate_eps_approx(rec, ctx.constraint, ctx.model)
    est = appendix_initial_estimate(rec, ctx.system, ctx.xi, ctx.eta)
    sys_ = ctx.system
    per_window = (sys_.norm_sq(rec.p_x, rec.p_y).mean(axis=1) / rec.deltas).tolist() if len(rec.deltas) else []
    doc = {
        "seed": seed, "eps": eps, "T_bar": rec.T_bar, "complete": rec.complete,
        "diagnostic": rec.diagnostic, "dt": rec.dt,
        "node_times": [rec.t + k * rec.dt for k in rec.node_steps],
        "window_controls": [rec.controls[:, a].tolist() for a in rec.node_steps[:-1]],
        "correction_energy_per_window": per_window,
        "correction_energy": rec.correction_energy(sys_),
        "clauses": {str(k): {"passed": r.passed, "slack": r.slack, "detail": r.detail}
                    for k, r in report.items()},
        "valid": report_passed(report),
        "initial_estimate": {"lags": est.lags, "values": est.values,
                             "slope": "NA" if est.slope is None else est.slope,
                             "C_emp": est.c_emp, "passed": est.passed},
    }
    return doc


def run_approx(ctx: Context, out: Path, workers: int) -> tuple[bool, list[Path]]:
    prov = provenance(ctx.cfg, "approx-solve")
    cells = [(s, e) for s in ctx.cfg.seeds for e in ctx.cfg.epsilons]
    paths = []
    for doc in _fan_out(_approx_cell, ctx.cfg, cells, workers):
        name = f"approx_seed{doc['seed']}_eps{format(doc['eps'], '.6g')}.json"
        paths.append(write_json(out / name, doc, prov))
    return True, paths


# -- stabilize -------------------------------------------------------------------


def _stabilize_cell(cfg_json: str, cell: tuple):
    c_spec, seed = cell
    ctx = _context(cfg_json)
    c = ctx.cfg
    scfg = ctx.stabilization(c_spec)
    rep = run_stabilization(scfg, ctx.xi, c.T, dt=None if c.dt == "auto" else float(c.dt), seed=seed)
    return c_spec, seed, rep


def run_stabilize(ctx: Context, out: Path, workers: int) -> tuple[bool, list[Path]]:
    prov = provenance(ctx.cfg, "stabilize")
    cells = [(c, s) for c in ctx.cfg.c_values for s in ctx.cfg.seeds]
    paths, summary = [], []
    for k, (c_spec, seed, rep) in enumerate(_fan_out(_stabilize_cell, ctx.cfg, cells, workers)):
        feas = np.append(rep.feasible, rep.feasible[-1] if len(rep.feasible) else True)
        ctrl = np.append(rep.controls, -1)
        rows = zip(rep.times, rep.norm_sq, rep.bound, rep.margin, ctrl, feas)
        paths.append(write_csv(out / f"stabilize_cell{k}.csv",
                               ["s", "norm_sq", "bound", "margin", "control", "feasible"], rows, prov))
        summary.append({"cell": k, "c": rep.c, "c_spec": c_spec, "seed": seed, "passed": rep.passed,
                        "first_violation": rep.first_violation, "tol_decay": rep.tol_decay,
                        "isometry_defect": rep.isometry_defect, "eta0": rep.eta0,
                        "infeasible_steps": int(np.sum(~np.asarray(rep.feasible, dtype=bool)))})
    paths.append(write_json(out / "stabilize_summary.json", {"cells": summary}, prov))
    return True, paths


# -- near-viability --------------------------------------------------------------


def _gap_cell(cfg_json: str, cell: tuple):
    seed, eps = cell
    ctx = _context(cfg_json)
    c = ctx.cfg
    return seed, near_viability_gap(ctx.constraint, ctx.model, c.t0, c.t0 + c.T, ctx.xi, ctx.eta, eps,
                                    c.n_mc, seed, None if c.dt == "auto" else float(c.dt))


def run_near_viability(ctx: Context, out: Path, workers: int) -> tuple[bool, list[Path]]:
    prov = provenance(ctx.cfg, "near-viability")
    cells = [(s, e) for s in ctx.cfg.seeds for e in ctx.cfg.epsilons]
    results = _fan_out(_gap_cell, ctx.cfg, cells, workers)
    policies = sorted({p for _, r in results for p in r.by_policy})
    rows = [[seed, r.eps, r.gap] + [r.by_policy.get(p) for p in policies] for seed, r in results]
    paths = [write_csv(out / "near_viability.csv", ["seed", "epsilon", "gap"] + policies, rows, prov)]
    return True, paths


# -- omega -----------------------------------------------------------------------


def run_omega(ctx: Context, out: Path, workers: int) -> tuple[bool, list[Path]]:
    prov = provenance(ctx.cfg, "omega")
    rows = [[d, omega(d), omega_defect(d) if d > 0 else 1.0] for d in ctx.cfg.omega_deltas]
    dyadic = [omega_defect(2.0**-k) for k in range(1, 21)]
    paths = [
        write_csv(out / "omega.csv", ["delta", "omega", "defect"], rows, prov),
        write_json(out / "omega_summary.json",
                   {"defect_sup_dyadic": max(dyadic), "defect_at_2^-20": dyadic[-1],
                    "defect_limit": 1.0, "dyadic_defects": dyadic}, prov),
    ]
    return True, paths


SUBCOMMANDS: dict[str, Callable[[Context, Path, int], tuple[bool, list[Path]]]] = {
    "validate-operators": run_validate_operators,
    "rates": run_rates,
    "tangency": run_tangency,
    "approx-solve": run_approx,
    "stabilize": run_stabilize,
    "near-viability": run_near_viability,
    "omega": run_omega,
}
