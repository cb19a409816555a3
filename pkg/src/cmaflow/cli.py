"""Scenario runner and study driver.

Commands:
    cmaflow solve <scenario.json>              solve + verification battery
    cmaflow study <scenario.json> --ladder ... refinement study
    cmaflow verify <solution.csv> <scenario.json>  re-check a stored solution

Outputs per run: solution.csv (+ JSON sidecar), ledger.json, reports.json,
grid.json.  Exit codes: 0 all enabled checks pass, 1 check failure,
2 schema error, 3 solver failure; failures also leave a machine-readable
error.json (except that schema errors may precede any output directory
content).  Log level comes from the CMAFLOW_LOG environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from cmaflow.domain import lateral_trace_points
from cmaflow.flow import (
    comparison_check,
    solve_flow,
    sub_barrier_cauchy,
    sub_barrier_dirichlet,
    subsolution_residual,
    super_barrier,
)
from cmaflow.ma_ops import ConvergenceError
from cmaflow.potentials import (
    GridFunction,
    grid_function_from_csv,
    slice_l1_bound_check,
    submean_check,
    time_lipschitz_estimate,
    time_semiconcavity_estimate,
)
from cmaflow.scenario import Scenario, SchemaError, parse_ladder
from cmaflow.transforms import (
    measure_space_modulus,
    mobius_average,
    semiconcavity_average,
    time_scale,
    walsh_translate,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK, EXIT_SCHEMA, EXIT_SOLVER = 0, 1, 2, 3

SATURATION_FLOOR = 1e-6


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# Verification battery


def run_checks(scenario, result, problem, grid, tgrid, dictionary, exact,
               tol_scale: float = 1.0, checks=None) -> dict:
    """Run the enabled checks against a solved flow; returns a report dict
    with one pass/fail entry per check."""
    checks = checks if checks is not None else scenario.checks
    U, ledger = result.U, result.ledger
    h, dt = grid.h, float(np.max(tgrid.steps))
    out = {}

    if "residual" in checks:
        rep = result.subsolution
        out["residual"] = {**rep.to_dict(),
                           "pass": rep.passed and rep.supersolution_passed}

    if "constants" in checks:
        out["constants"] = {
            "time_lipschitz_estimate": result.time_lipschitz,
            "kappa_U": ledger.kappa_U,
            "time_semiconcavity_estimate": result.time_semiconcavity,
            "C_U": ledger.C_U,
            "pass": bool(result.time_lipschitz <= ledger.kappa_U + 1e-6
                         and result.time_semiconcavity <= ledger.C_U + 1e-6),
        }

    if "sandwich" in checks:
        tol = (10.0 * h * h) * tol_scale
        lower = ledger.B * result.rho - ledger.M_h
        lo_margin = float(np.min(U.values - lower[None, :]))
        hi_margin = float(np.min(ledger.M_h - U.values))
        out["sandwich"] = {"lower_margin": lo_margin, "upper_margin": hi_margin,
                           "tol": tol, "pass": bool(lo_margin >= -tol
                                                    and hi_margin >= -tol)}

    if "barriers" in checks:
        tol_b = 5.0 * (h + dt) * tol_scale
        bd, trace_d = sub_barrier_dirichlet(problem, result.rho, grid, tgrid,
                                            dictionary, ledger)
        bc, trace_c = sub_barrier_cauchy(problem, result.rho, grid, tgrid, ledger)
        sb, _ = super_barrier(problem, grid, tgrid)
        rep_d = subsolution_residual(bd, problem, dictionary, trace=trace_d)
        rep_c = subsolution_residual(bc, problem, dictionary, trace=trace_c)
        out["barriers"] = {
            "dirichlet_residual": rep_d.to_dict(),
            "cauchy_residual": rep_c.to_dict(),
            "dirichlet_below_U": float(np.min(U.values - bd.values)),
            "cauchy_below_U": float(np.min(U.values - bc.values)),
            "U_below_harmonic": float(np.min(sb.values - U.values)),
            "tol": tol_b,
        }
        out["barriers"]["pass"] = bool(
            rep_d.passed and rep_c.passed
            and out["barriers"]["dirichlet_below_U"] >= -tol_b
            and out["barriers"]["cauchy_below_U"] >= -tol_b
            and out["barriers"]["U_below_harmonic"] >= -tol_b)

    if "boundary" in checks:
        br = result.boundary.to_dict()
        lip = max(ledger.M_h, 1.0)
        tol_lat = 8.0 * lip * h * tol_scale
        br["tol_lateral"] = tol_lat
        br["pass"] = bool(result.boundary.lateral_max_error <= tol_lat)
        if exact is not None:
            err = _exact_error(U, exact)
            br["exact_linf_error"] = err
        out["boundary"] = br

    if "slice_lemmas" in checks:
        out["slice_lemmas"] = _slice_lemma_checks(U, tol_scale)

    if "transforms" in checks:
        out["transforms"] = _transform_checks(problem, result, grid, tgrid,
                                              dictionary)

    out["pass"] = all(v.get("pass", True) for v in out.values()
                      if isinstance(v, dict))
    return out


def _exact_error(U: GridFunction, exact) -> float:
    errs = [float(np.max(np.abs(U.values[k] - exact(float(t), U.space_grid.nodes))))
            for k, t in enumerate(U.time_grid.nodes)]
    return max(errs)


def _slice_lemma_checks(U: GridFunction, tol_scale: float) -> dict:
    tg = U.time_grid
    S = tg.S
    t0, z0 = 0.5 * S, np.zeros(U.space_grid.domain.real_dim)
    eps, r = 0.2 * S, 0.4
    sub = submean_check(U, t0, z0, eps, r)
    zero = GridFunction(np.zeros_like(U.values), U.space_grid, tg)
    l1 = slice_l1_bound_check(U, zero, 0.25 * S, 0.5 * S, 0.9 * S)
    return {"submean_margin": sub.margin, "submean_pass": sub.passed,
            "slice_l1_lhs": l1.lhs, "slice_l1_rhs": l1.rhs,
            "slice_l1_pass": l1.passed,
            "pass": bool(sub.passed and l1.passed)}


def _transform_checks(problem, result, grid, tgrid, dictionary) -> dict:
    U, ledger = result.U, result.ledger
    out = {}
    for s in (1.05, 0.95):
        _, rep = time_scale(U, s, ledger, reference=U)
        out[f"time_scale_{s}"] = rep.to_dict()
    _, rep = semiconcavity_average(U, 1.05, ledger, reference=U)
    out["semiconcave_avg"] = rep.to_dict()

    bd, _ = sub_barrier_dirichlet(problem, result.rho, grid, tgrid, dictionary,
                                  ledger)
    bc, _ = sub_barrier_cauchy(problem, result.rho, grid, tgrid, ledger)
    sb, _ = super_barrier(problem, grid, tgrid)
    sub_env = np.maximum(bd.values, bc.values)
    delta = grid.h
    g_vals = problem.g_values(grid)
    moduli = {
        "eta_u": measure_space_modulus(sub_env, grid, delta),
        "eta_H": measure_space_modulus(sb.values, grid, delta),
        "eta_F": _forcing_modulus(problem, grid, delta, ledger),
        "eta_G": measure_space_modulus(
            np.log(np.maximum(g_vals, 1e-300))[None, :], grid, delta),
    }
    xi = np.zeros(grid.domain.real_dim)
    xi[0] = delta
    _, rep = walsh_translate(U, xi, moduli, horizon=problem.T, reference=U)
    out["walsh"] = rep.to_dict()

    a = np.zeros(grid.domain.real_dim)
    for a_norm in (0.1, 0.05):
        a[0] = a_norm
        _, rep = mobius_average(U, a, ledger, reference=U)
        out[f"mobius_{a_norm}"] = rep.to_dict()
    out["pass"] = all(v.get("passed", True) for v in out.values()
                      if isinstance(v, dict))
    return out


def _forcing_modulus(problem, grid, delta, ledger) -> float:
    """Modulus of F at lag delta on the (z, r) probe box, by sampling."""
    F = problem.F
    if F.family == "zero":
        return 0.0
    box = ledger.M_U + 1.0
    eta = abs(F.kappa_F) * delta if F.family == "affine" else 0.0
    if F.family == "affine" and F.psi is not None:
        eta += measure_space_modulus(
            np.asarray(F.psi(grid.nodes), dtype=float)[None, :], grid, delta)
    if F.family == "custom":
        rs = np.linspace(-box, box, 9)
        for t in np.linspace(0, problem.T * 0.99, 5):
            for r in rs:
                vals = F.eval(float(t), grid.nodes, float(r))
                eta = max(eta, measure_space_modulus(vals[None, :], grid, delta))
        eta += F.kappa_F * delta
    return eta


# ---------------------------------------------------------------------------
# Scenario runner


def run_scenario(path, out_dir=None, tol_scale: float = 1.0, checks=None,
                 mode: str | None = None) -> int:
    """Solve a scenario file, run its checks, write artifacts; returns the
    exit code."""
    out_dir = out_dir or os.path.splitext(str(path))[0] + "_out"
    try:
        scenario = Scenario.load(path)
        built = scenario.build()
        problem, grid, tgrid, dictionary, exact = built
        problem.validate(grid, tgrid, dictionary)
    except (SchemaError, ValueError, OSError) as e:
        _write(os.path.join(out_dir, "error.json"),
               json.dumps({"error": {"kind": "schema", "message": str(e)}}))
        logger.error("schema error: %s", e)
        return EXIT_SCHEMA

    solver_opts = dict(scenario.solver)
    if mode:
        solver_opts["mode"] = mode
    try:
        t0 = time.perf_counter()
        result = solve_flow(problem, (grid, tgrid), dictionary,
                            mode=solver_opts.get("mode", "red-black"),
                            update_tol=float(solver_opts.get("update_tol", 1e-10)),
                            validate=False)
        wall = time.perf_counter() - t0
    except ConvergenceError as e:
        _write(os.path.join(out_dir, "error.json"),
               json.dumps({"error": {"kind": "solver", "message": str(e),
                                     "residual": e.residual}}))
        logger.error("solver failure: %s", e)
        return EXIT_SOLVER

    reports = run_checks(scenario, result, problem, grid, tgrid, dictionary,
                         exact, tol_scale=tol_scale, checks=checks)
    reports["wall_time_s"] = wall
    if exact is not None:
        reports["exact_linf_error"] = _exact_error(result.U, exact)

    _write(os.path.join(out_dir, "solution.csv"), result.U.to_csv())
    _write(os.path.join(out_dir, "solution.meta.json"), result.U.metadata_json())
    _write(os.path.join(out_dir, "ledger.json"), result.ledger.to_json())
    _write(os.path.join(out_dir, "grid.json"), grid.to_json())
    _write(os.path.join(out_dir, "reports.json"),
           json.dumps(reports, indent=1, default=float))
    ok = reports.get("pass", False)
    logger.info("scenario %s: %s in %.2fs", scenario.name,
                "pass" if ok else "FAIL", wall)
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# Convergence study


def convergence_study(scenario: Scenario, ladder, golden=None,
                      out_dir=None) -> dict:
    """Run the scenario over a refinement ladder and report errors and
    observed orders.

    The time step scales with the spacing.  Levels whose error sits at the
    solver-tolerance floor are marked saturated and excluded from the order
    assertion (exact reproduction of the reference is the strongest
    outcome, not a failure).
    """
    if scenario.manufactured is None and golden is None:
        raise SchemaError("study requires a manufactured reference or a golden file")
    rows = []
    base_h = scenario.h_x
    for h in sorted(ladder, reverse=True):
        K = max(1, int(round(scenario.K * base_h / h)))
        problem, grid, tgrid, dictionary, exact = scenario.build(h_x=h, K=K)
        t0 = time.perf_counter()
        result = solve_flow(problem, (grid, tgrid), dictionary)
        wall = time.perf_counter() - t0
        err = _exact_error(result.U, exact) if exact is not None else math.nan
        rows.append({
            "h_x": h, "K": K, "dt": float(np.max(tgrid.steps)),
            "linf_error": err, "wall_time_s": wall,
            "checks_pass": bool(result.checks["scheme_residual_pass"]),
            "ledger": json.loads(result.ledger.to_json()),
            "saturated": bool(err <= SATURATION_FLOOR),
        })
    for i in range(1, len(rows)):
        e0, e1 = rows[i - 1]["linf_error"], rows[i]["linf_error"]
        hr = rows[i - 1]["h_x"] / rows[i]["h_x"]
        if rows[i]["saturated"] or rows[i - 1]["saturated"]:
            rows[i]["observed_order"] = "saturated"
        elif e1 > 0:
            rows[i]["observed_order"] = math.log(e0 / e1) / math.log(hr)
        else:
            rows[i]["observed_order"] = "saturated"
    study = {"scenario": scenario.name, "rows": rows}
    orders = [r["observed_order"] for r in rows[1:]
              if isinstance(r.get("observed_order"), float)]
    study["min_observed_order"] = min(orders) if orders else "saturated"
    study["pass"] = all(isinstance(o, str) or o >= 0.8
                        for o in [r.get("observed_order") for r in rows[1:]])
    if out_dir:
        _write(os.path.join(out_dir, "study.json"),
               json.dumps(study, indent=1, default=float))
    return study


# ---------------------------------------------------------------------------
# Verify stored solution


def verify_solution(solution_path, scenario_path, tol_scale: float = 1.0,
                    checks=None) -> int:
    try:
        scenario = Scenario.load(scenario_path)
        problem, grid, tgrid, dictionary, exact = scenario.build()
        problem.validate(grid, tgrid, dictionary)
        with open(solution_path) as f:
            U = grid_function_from_csv(f.read(), grid, tgrid)
    except (SchemaError, ValueError, OSError) as e:
        logger.error("schema error: %s", e)
        return EXIT_SCHEMA

    rep = subsolution_residual(U, problem, dictionary)
    lip = time_lipschitz_estimate(U)
    semi = time_semiconcavity_estimate(U)
    from cmaflow.flow import compute_constants, boundary_attainment_report
    from cmaflow.ma_ops import solve_rho
    rho, rho_rep = solve_rho(problem.g_values(grid), grid, dictionary,
                             p=problem.p)
    ledger = compute_constants(problem, rho, grid, tgrid, rho_rep)
    ok = rep.passed and rep.supersolution_passed \
        and lip <= ledger.kappa_U + 1e-6 and semi <= ledger.C_U + 1e-6
    report = {"residual": rep.to_dict(), "time_lipschitz": lip,
              "time_semiconcavity": semi, "kappa_U": ledger.kappa_U,
              "C_U": ledger.C_U, "pass": bool(ok)}
    if exact is not None:
        report["exact_linf_error"] = _exact_error(U, exact)
    print(json.dumps(report, indent=1, default=float))
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# Entry point


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CMAFLOW_LOG", "WARNING"))
    parser = argparse.ArgumentParser(prog="cmaflow",
                                     description="parabolic complex Monge-Ampere "
                                                 "flow solver on the unit ball")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve a scenario and run its checks")
    p_solve.add_argument("scenario")
    p_solve.add_argument("--out", default=None)
    p_solve.add_argument("--tol-scale", type=float, default=1.0)
    p_solve.add_argument("--checks", default=None,
                         help="comma-separated list overriding scenario checks")
    p_solve.add_argument("--mode", default=None,
                         choices=["red-black", "sequential"])

    p_study = sub.add_parser("study", help="refinement study over a ladder")
    p_study.add_argument("scenario")
    p_study.add_argument("--ladder", required=True,
                         help="spacings, e.g. 1/8,1/16,1/32")
    p_study.add_argument("--out", default=None)
    p_study.add_argument("--golden", default=None)

    p_verify = sub.add_parser("verify", help="re-run checks on a stored solution")
    p_verify.add_argument("solution")
    p_verify.add_argument("scenario")
    p_verify.add_argument("--tol-scale", type=float, default=1.0)
    p_verify.add_argument("--checks", default=None)

    args = parser.parse_args(argv)

    if args.command == "solve":
        checks = args.checks.split(",") if args.checks else None
        return run_scenario(args.scenario, out_dir=args.out,
                            tol_scale=args.tol_scale, checks=checks,
                            mode=args.mode)
    if args.command == "study":
        try:
            scenario = Scenario.load(args.scenario)
            ladder = parse_ladder(args.ladder)
            study = convergence_study(scenario, ladder, golden=args.golden,
                                      out_dir=args.out)
        except SchemaError as e:
            logger.error("schema error: %s", e)
            return EXIT_SCHEMA
        except ConvergenceError as e:
            logger.error("solver failure: %s", e)
            return EXIT_SOLVER
        print(json.dumps(study, indent=1, default=float))
        return EXIT_OK if study["pass"] else EXIT_CHECK
    if args.command == "verify":
        checks = args.checks.split(",") if args.checks else None
        return verify_solution(args.solution, args.scenario,
                               tol_scale=args.tol_scale, checks=checks)
    return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
