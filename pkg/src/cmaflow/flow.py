"""Cauchy-Dirichlet solver for the parabolic complex Monge-Ampere flow

    ma_root(u_t) = [ exp(d_t u + F(t, z, u)) g ]^(1/n)

on the unit ball, together with the quantitative verification apparatus:
explicit barrier functions, the constants ledger (uniform bound, implied
time-Lipschitz and time-semiconcavity constants), sub/supersolution
residual reports, the comparison-principle check, and boundary attainment
diagnostics.

Time stepping is implicit Euler: the time derivative is discretized by
backward differences inside the per-node scalar equation, which keeps the
scheme unconditionally monotone through the exponential nonlinearity.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from cmaflow.domain import BallDomain, SpaceGrid, TimeGrid
from cmaflow.ma_ops import (
    ConvergenceError,
    HermitianDictionary,
    ImplicitStepRhs,
    OperatorAssembly,
    harmonic_extension,
    ma_root,
    maximal_psh,
    solve_monotone,
    solve_rho,
)
from cmaflow.potentials import (
    BoundaryData,
    GridFunction,
    default_slice_tol,
    time_lipschitz_estimate,
    time_semiconcavity_estimate,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data specifications


@dataclass
class FSpec:
    """The zeroth-order forcing F(t, z, r): continuous, increasing in r,
    Lipschitz in (t, r) with declared constant kappa_F, and semi-convex in
    (t, r) with declared constant C_F.

    ``family`` is one of "zero", "affine" (F = lam*r + mu*t + psi(z) with
    lam >= 0) or "custom"; custom forcings must declare their constants.
    """

    family: str = "zero"
    lam: float = 0.0
    mu: float = 0.0
    psi: Callable | None = None
    custom: Callable | None = None
    kappa_F: float = 0.0
    C_F: float = 0.0

    def __post_init__(self):
        if self.family not in ("zero", "affine", "custom"):
            raise ValueError(f"unknown F family {self.family!r}")
        if self.family == "affine" and self.lam < 0:
            raise ValueError("affine forcing must be increasing in r (lam >= 0)")
        if self.family == "custom" and self.custom is None:
            raise ValueError("custom forcing requires a callable")

    def eval(self, t: float, pts: np.ndarray, r) -> np.ndarray:
        m = len(np.atleast_2d(pts))
        r = np.broadcast_to(np.asarray(r, dtype=float), (m,))
        if self.family == "zero":
            return np.zeros(m)
        if self.family == "affine":
            out = self.lam * r + self.mu * t
            if self.psi is not None:
                out = out + np.asarray(self.psi(np.atleast_2d(pts)), dtype=float)
            return out
        return np.asarray(self.custom(t, np.atleast_2d(pts), r), dtype=float)

    def d_dr(self, t: float, pts: np.ndarray, r) -> np.ndarray:
        m = len(np.atleast_2d(pts))
        if self.family == "zero":
            return np.zeros(m)
        if self.family == "affine":
            return np.full(m, self.lam)
        eps = 1e-6
        r = np.broadcast_to(np.asarray(r, dtype=float), (m,))
        return (self.eval(t, pts, r + eps) - self.eval(t, pts, r - eps)) / (2 * eps)

    def verify(self, T: float, pts: np.ndarray, r_lo: float, r_hi: float,
               slack: float = 1e-6) -> None:
        """Sampled checks: monotone in r, and difference quotients consistent
        with the declared kappa_F."""
        ts = np.linspace(0.0, T * (1 - 1e-9), 7)
        rs = np.linspace(r_lo, r_hi, 7)
        sub = pts[:: max(1, len(pts) // 64)]
        for t in ts:
            vals = np.stack([self.eval(t, sub, r) for r in rs])
            if np.min(np.diff(vals, axis=0)) < -1e-9:
                raise ValueError("forcing is not increasing in r")
            dq_r = np.max(np.abs(np.diff(vals, axis=0))) / (rs[1] - rs[0])
            if dq_r > self.kappa_F * (1 + slack) + 1e-9:
                raise ValueError(
                    f"declared kappa_F={self.kappa_F} inconsistent with sampled "
                    f"r-quotient {dq_r:.6g}")
        for r in (r_lo, 0.5 * (r_lo + r_hi), r_hi):
            vals = np.stack([self.eval(t, sub, r) for t in ts])
            dq_t = np.max(np.abs(np.diff(vals, axis=0))) / (ts[1] - ts[0])
            if dq_t > self.kappa_F * (1 + slack) + 1e-9:
                raise ValueError(
                    f"declared kappa_F={self.kappa_F} inconsistent with sampled "
                    f"t-quotient {dq_t:.6g}")


@dataclass
class FlowProblem:
    """One solvable Cauchy-Dirichlet instance: domain, horizon T, solve-up-to
    time S, density g (callable on points, with its integrability exponent
    p > 1), forcing F, and boundary data h."""

    domain: BallDomain
    T: float
    S: float
    g: Callable
    p: float
    F: FSpec
    h: BoundaryData
    zero_g_warn_fraction: float = 0.02

    def __post_init__(self):
        if not 0 < self.S < self.T:
            raise ValueError("need 0 < S < T")
        if self.p <= 1:
            raise ValueError("integrability exponent must exceed 1")

    def g_values(self, grid: SpaceGrid) -> np.ndarray:
        g = np.asarray(self.g(grid.nodes), dtype=float)
        if np.any(g < 0):
            i = int(np.argmin(g))
            raise ValueError(f"density negative at node {i}: g={g[i]:.3e}")
        frac = float(np.mean(g <= 0))
        if frac > self.zero_g_warn_fraction:
            logger.warning("density vanishes on %.1f%% of nodes", 100 * frac)
        return g

    def validate(self, grid: SpaceGrid, time_grid: TimeGrid,
                 dictionary: HermitianDictionary) -> None:
        if time_grid.S > self.S + 1e-12:
            raise ValueError("time grid extends beyond the solve horizon S")
        self.g_values(grid)
        self.h.validate(grid, time_grid, dictionary)
        m_h = self._sup_h(grid, time_grid)
        self.F.verify(self.T, grid.nodes, -m_h - 2.0, m_h + 2.0)

    def _sup_h(self, grid: SpaceGrid, time_grid: TimeGrid) -> float:
        from cmaflow.domain import lateral_trace_points

        pts = np.unique(np.round(lateral_trace_points(grid), 12), axis=0)
        probe = np.union1d(time_grid.nodes, np.linspace(0.0, self.T, 65))
        sup = float(np.max(np.abs(self.h.initial_values(grid))))
        for t in probe:
            sup = max(sup, float(np.max(np.abs(self.h.lateral_values(t, pts)))))
        return sup


# ---------------------------------------------------------------------------
# Constants ledger


@dataclass
class ConstantsLedger:
    """All uniform constants computed from one problem instance.

    M_h bounds |h| on the parabolic boundary, M_F = sup F(., ., M_h),
    B = exp(M_F/n), and M_U = M_h + B * ||rho||_inf bounds |U| through the
    barrier sandwich.  kappa_U and C_U are the explicit time-Lipschitz
    (t |d_t U| <= kappa_U) and time-semiconcavity (t^2 d_t^2 U <= C_U)
    constants; kappa_h, kappa_F, C_h, C_F are the declared data constants.
    """

    M_h: float
    M_F: float
    B: float
    M_U: float
    kappa_h: float
    kappa_F: float
    C_h: float
    C_F: float
    kappa_U: float
    C_U: float
    rho_sup: float
    g_lp_root: float
    c_n_observed: float
    n: int
    T: float
    samplings: dict = field(default_factory=dict)

    @property
    def c_time_scale(self) -> float:
        """Drift constant of the time-scaling transform."""
        return 2 * self.M_U + 2 * self.kappa_h + 2 * self.n \
            + self.kappa_F * (self.T + self.M_U)

    @property
    def c_semiconcave(self) -> float:
        """Drift constant of the semiconcavity averaging transform."""
        return self.C_h + 1 + 2 * self.M_h + 8 * self.kappa_h + 2 * self.kappa_F * (
            self.M_U + 4 * self.kappa_U + self.T + self.C_F * self.T ** 2
            + 16 * self.kappa_U ** 2)

    def to_json(self) -> str:
        data = {k: getattr(self, k) for k in (
            "M_h", "M_F", "B", "M_U", "kappa_h", "kappa_F", "C_h", "C_F",
            "kappa_U", "C_U", "rho_sup", "g_lp_root", "c_n_observed", "n", "T")}
        data["c_time_scale"] = self.c_time_scale
        data["c_semiconcave"] = self.c_semiconcave
        data["samplings"] = self.samplings
        return json.dumps(data, indent=1)


def compute_constants(problem: FlowProblem, rho: np.ndarray, grid: SpaceGrid,
                      time_grid: TimeGrid,
                      rho_report=None) -> ConstantsLedger:
    """Populate the ledger from samplings of h, F and the solved rho.

    The boundary sup runs over boundary hits crossed with time nodes plus a
    uniform probe of [0, T]; the forcing sup runs over the same times and
    all stored nodes at r = M_h.  M_U uses the solved rho rather than the
    non-explicit L^p bound; the L^p form is logged as an empirical ratio.
    """
    from cmaflow.domain import lateral_trace_points

    n = problem.domain.n
    pts = np.unique(np.round(lateral_trace_points(grid), 12), axis=0)
    probe = np.union1d(time_grid.nodes, np.linspace(0.0, problem.T, 65))
    M_h = float(np.max(np.abs(problem.h.initial_values(grid))))
    for t in probe:
        M_h = max(M_h, float(np.max(np.abs(problem.h.lateral_values(t, pts)))))
    M_F = max(float(np.max(problem.F.eval(t, grid.nodes, M_h))) for t in probe)
    B = math.exp(M_F / n)
    rho_sup = float(np.max(np.abs(rho)))
    M_U = M_h + B * rho_sup
    problem.F.verify(problem.T, grid.nodes, -M_U - 1.0, M_U + 1.0)
    kh, kF = problem.h.kappa_h, problem.F.kappa_F
    Ch, CF, T = problem.h.C_h, problem.F.C_F, problem.T
    kappa_U = (T + 1) * (3 * M_U + 2 * kh + 2 * n + kF * (T + M_U))
    C_U = Ch + 2 * M_h + 8 * kh + (2 * kF + 3) * (
        M_U + 5 * kappa_U + 1 + CF * T ** 2 + 16 * kappa_U ** 2)
    g_lp_root = rho_report.g_lp_root if rho_report is not None else math.nan
    c_n = rho_report.empirical_ratio if rho_report is not None else math.nan
    return ConstantsLedger(
        M_h=M_h, M_F=M_F, B=B, M_U=M_U, kappa_h=kh, kappa_F=kF, C_h=Ch, C_F=CF,
        kappa_U=kappa_U, C_U=C_U, rho_sup=rho_sup, g_lp_root=g_lp_root,
        c_n_observed=c_n, n=n, T=T,
        samplings={
            "boundary": f"{len(pts)} sphere hits x {len(probe)} times in [0, T]",
            "forcing": f"{grid.n_nodes} nodes x {len(probe)} times at r = M_h, "
                       f"r-probe box [-M_U-1, M_U+1]",
        })


# ---------------------------------------------------------------------------
# Reports


@dataclass
class SubsolutionReport:
    """PDE-side and boundary-side margins of a candidate subsolution.

    min_residual is the most negative value of
    ma_root(u_t) - [e^{d_t u + F} g]^(1/n) over nodes and time steps
    (backward time differences, k >= 1); max_residual is the other side,
    relevant for supersolution checks.  Right differences at k = 0 are
    reported separately.  boundary_excess is the largest violation of
    u <= h on the parabolic boundary.
    """

    min_residual: float
    max_residual: float
    initial_min_residual: float
    boundary_excess: float
    tol_pde: float
    tol_bc: float

    @property
    def passed(self) -> bool:
        return self.min_residual >= -self.tol_pde and self.boundary_excess <= self.tol_bc

    @property
    def supersolution_passed(self) -> bool:
        return self.max_residual <= self.tol_pde

    def to_dict(self) -> dict:
        return {**self.__dict__, "passed": self.passed,
                "supersolution_passed": self.supersolution_passed}


@dataclass
class ComparisonReport:
    max_gap: float
    tol_cmp: float
    boundary_order_margin: float
    sub_report: SubsolutionReport | None
    super_report: SubsolutionReport | None
    psi_semiconcavity: float
    skipped: bool
    reason: str = ""

    @property
    def passed(self) -> bool:
        return (not self.skipped) and self.max_gap <= self.tol_cmp

    def to_dict(self) -> dict:
        return {"max_gap": self.max_gap, "tol_cmp": self.tol_cmp,
                "boundary_order_margin": self.boundary_order_margin,
                "psi_semiconcavity": self.psi_semiconcavity,
                "skipped": self.skipped, "reason": self.reason,
                "passed": self.passed}


@dataclass
class BoundaryReport:
    """Boundary attainment diagnostics: the lateral gap carries node values
    to their sphere hit points and compares with h there; the initial part
    tracks ||u_{t_k} - h_0||_{L1} on the first slices with a fitted decay
    rate in t."""

    lateral_max_error: float
    initial_l1_errors: list
    initial_times: list
    decay_rate: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Barriers


def _lateral_bvals(problem: FlowProblem, grid: SpaceGrid, t: float) -> dict:
    asm = OperatorAssembly.for_grid(grid)
    return asm.boundary_values(lambda pts: problem.h.lateral_values(t, pts))


def sub_barrier_dirichlet(problem: FlowProblem, rho: np.ndarray,
                          grid: SpaceGrid, time_grid: TimeGrid,
                          dictionary: HermitianDictionary,
                          ledger: ConstantsLedger | None = None):
    """Subsolution matching h at the lateral boundary:

        u(t, z) = phi_t(z) + h_0(z) + A rho(z),
        A = exp((kappa_h + M_F)/n),

    where phi_t is the maximal psh function with boundary values
    h_t - h_0.  Returns (GridFunction, trace callable); the trace equals h
    on the sphere exactly.
    """
    n = problem.domain.n
    if ledger is None:
        M_F = _quick_MF(problem, grid, time_grid)
    else:
        M_F = ledger.M_F
    A = math.exp((problem.h.kappa_h + M_F) / n)
    h0 = problem.h.initial_values(grid)

    from cmaflow.domain import lateral_trace_points

    spts = np.unique(np.round(lateral_trace_points(grid), 12), axis=0)
    values = np.empty((time_grid.K + 1, grid.n_nodes))
    phi_prev, mean_prev = None, 0.0
    for k, t in enumerate(time_grid.nodes):
        def bnd(pts, t=t):
            return problem.h.lateral_values(t, pts) - problem.h.initial_values(pts)
        mean_now = float(np.mean(bnd(spts)))
        x0 = None if phi_prev is None else phi_prev + (mean_now - mean_prev)
        phi = maximal_psh(bnd, grid, dictionary, x0=x0)
        values[k] = phi + h0 + A * rho
        phi_prev, mean_prev = phi, mean_now

    def trace(t, pts):
        return problem.h.lateral_values(t, pts)

    return GridFunction(values, grid, time_grid), trace


def _quick_MF(problem, grid, time_grid):
    pts = grid.nodes
    probe = np.union1d(time_grid.nodes, np.linspace(0.0, problem.T, 33))
    M_h = float(np.max(np.abs(problem.h.initial_values(grid))))
    from cmaflow.domain import lateral_trace_points
    spts = np.unique(np.round(lateral_trace_points(grid), 12), axis=0)
    for t in probe:
        M_h = max(M_h, float(np.max(np.abs(problem.h.lateral_values(t, spts)))))
    return max(float(np.max(problem.F.eval(t, pts, M_h))) for t in probe)


def sub_barrier_cauchy(problem: FlowProblem, rho: np.ndarray, grid: SpaceGrid,
                       time_grid: TimeGrid,
                       ledger: ConstantsLedger | None = None):
    """Subsolution attaining the initial data as t -> 0:

        v(t, z) = h_0(z) + t (rho(z) - C) + n [ (t/T) log(t/T) - t/T ],
        C = kappa_h + M_F - min(n log T, 0).

    Exact formula sampled on the grid; the t log t term vanishes at t = 0.
    Returns (GridFunction, trace callable).
    """
    n, T = problem.domain.n, problem.T
    M_F = ledger.M_F if ledger is not None else _quick_MF(problem, grid, time_grid)
    C = problem.h.kappa_h + M_F - min(n * math.log(T), 0.0)
    h0 = problem.h.initial_values(grid)

    def eta(t):
        return 0.0 if t <= 0 else n * ((t / T) * math.log(t / T) - t / T)

    values = np.empty((time_grid.K + 1, grid.n_nodes))
    for k, t in enumerate(time_grid.nodes):
        values[k] = h0 + t * (rho - C) + eta(t)

    def trace(t, pts):
        return problem.h.lateral_values(0.0, pts) + t * (0.0 - C) + eta(t)

    return GridFunction(values, grid, time_grid), trace


def super_barrier(problem: FlowProblem, grid: SpaceGrid, time_grid: TimeGrid):
    """Slice-wise harmonic extension H(t, .) of the lateral data: dominates
    every subsolution, hence the flow solution, from above."""
    from cmaflow.domain import lateral_trace_points

    spts = np.unique(np.round(lateral_trace_points(grid), 12), axis=0)
    values = np.empty((time_grid.K + 1, grid.n_nodes))
    prev, mean_prev = None, 0.0
    for k, t in enumerate(time_grid.nodes):
        mean_now = float(np.mean(problem.h.lateral_values(float(t), spts)))
        x0 = None if prev is None else prev + (mean_now - mean_prev)
        values[k] = harmonic_extension(
            lambda pts, t=t: problem.h.lateral_values(t, pts), grid, x0=x0)
        prev, mean_prev = values[k], mean_now

    def trace(t, pts):
        return problem.h.lateral_values(t, pts)

    return GridFunction(values, grid, time_grid), trace


# ---------------------------------------------------------------------------
# The implicit scheme


def step_implicit(u_prev: np.ndarray, t_next: float, dt: float,
                  problem: FlowProblem, grid: SpaceGrid,
                  dictionary: HermitianDictionary, *,
                  g_values: np.ndarray | None = None,
                  x0: np.ndarray | None = None, mode: str = "red-black",
                  update_tol: float = 1e-10) -> np.ndarray:
    """One backward-Euler step: solve per node

        min_A Delta_A u = [ e^{(u - u_prev)/dt + F(t_next, z, u)} g ]^(1/n)

    with Dirichlet data h(t_next, .).  The per-node scalar equation is
    strictly monotone in the center value, so the root is unique.
    """
    if g_values is None:
        g_values = problem.g_values(grid)
    n = problem.domain.n
    rhs = ImplicitStepRhs(g_values ** (1.0 / n), u_prev, dt, t_next,
                          problem.F, grid.nodes, n)
    bvals = _lateral_bvals(problem, grid, t_next)
    start = u_prev if x0 is None else x0
    return solve_monotone(grid, dictionary, bvals, rhs, start,
                          update_tol=update_tol, mode=mode)


def _initial_rate_guess(problem, grid, dictionary, u0, g_values) -> np.ndarray:
    """Explicit predictor for d_t u at t = 0 read off the equation:
    n log(ma_root(h_0)) - F(0, z, h_0) - log g.  Used only as the first
    step's initial iterate."""
    root = ma_root(u0, grid, dictionary,
                   boundary=lambda pts: problem.h.lateral_values(0.0, pts))
    n = problem.domain.n
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = n * np.log(np.maximum(root, 1e-300)) \
            - np.log(np.maximum(g_values, 1e-300)) \
            - problem.F.eval(0.0, grid.nodes, u0)
    ok = (g_values > 0) & (root > 1e-12) & np.isfinite(rate)
    return np.clip(np.where(ok, rate, 0.0), -1e3, 1e3)


@dataclass
class FlowResult:
    U: GridFunction
    ledger: ConstantsLedger
    rho: np.ndarray
    rho_report: object
    subsolution: SubsolutionReport
    boundary: BoundaryReport
    time_lipschitz: float
    time_semiconcavity: float
    checks: dict = field(default_factory=dict)

    def reports_json(self) -> str:
        data = {
            "subsolution": self.subsolution.to_dict(),
            "boundary": self.boundary.to_dict(),
            "time_lipschitz_estimate": self.time_lipschitz,
            "time_semiconcavity_estimate": self.time_semiconcavity,
            "kappa_U": self.ledger.kappa_U,
            "C_U": self.ledger.C_U,
            "rho": {"sup_norm": self.ledger.rho_sup,
                    "empirical_ratio": self.ledger.c_n_observed},
            "checks": self.checks,
        }
        return json.dumps(data, indent=1)


def solve_flow(problem: FlowProblem, grids, dictionary: HermitianDictionary, *,
               mode: str = "red-black", update_tol: float = 1e-10,
               validate: bool = True) -> FlowResult:
    """Time-march the implicit scheme from u(0, .) = h_0 and attach the
    verification reports.

    ``grids`` is a (SpaceGrid, TimeGrid) pair.  Steps after the first warm
    start from the linear-in-time extrapolation of the two previous slices.
    """
    grid, time_grid = grids
    if validate:
        problem.validate(grid, time_grid, dictionary)
    g_values = problem.g_values(grid)
    rho, rho_report = solve_rho(g_values, grid, dictionary, p=problem.p)
    ledger = compute_constants(problem, rho, grid, time_grid, rho_report)

    t = time_grid.nodes
    values = np.empty((time_grid.K + 1, grid.n_nodes))
    values[0] = problem.h.initial_values(grid)
    for k in range(1, time_grid.K + 1):
        dt = t[k] - t[k - 1]
        if k >= 2:
            x0 = values[k - 1] + (values[k - 1] - values[k - 2]) \
                * (dt / (t[k - 1] - t[k - 2]))
        else:
            x0 = values[0] + dt * _initial_rate_guess(problem, grid, dictionary,
                                                      values[0], g_values)
        values[k] = step_implicit(values[k - 1], float(t[k]), float(dt), problem,
                                  grid, dictionary, g_values=g_values, x0=x0,
                                  mode=mode, update_tol=update_tol)
        logger.debug("step %d/%d done (t=%.4f)", k, time_grid.K, t[k])

    U = GridFunction(values, grid, time_grid)
    sub = subsolution_residual(U, problem, dictionary, grid=grid)
    boundary = boundary_attainment_report(U, problem)
    lip = time_lipschitz_estimate(U)
    semi = time_semiconcavity_estimate(U) if time_grid.K >= 2 else -math.inf
    result = FlowResult(U=U, ledger=ledger, rho=rho, rho_report=rho_report,
                        subsolution=sub, boundary=boundary,
                        time_lipschitz=lip, time_semiconcavity=semi)
    result.checks["lipschitz_conformance"] = bool(lip <= ledger.kappa_U + 1e-6)
    result.checks["semiconcavity_conformance"] = bool(semi <= ledger.C_U + 1e-6)
    result.checks["scheme_residual_pass"] = bool(sub.passed and sub.supersolution_passed)
    return result


# ---------------------------------------------------------------------------
# Residual and comparison checks


def subsolution_residual(u: GridFunction, problem: FlowProblem,
                         dictionary: HermitianDictionary, *,
                         grid: SpaceGrid | None = None, trace=None,
                         tol_pde: float | None = None,
                         tol_bc: float | None = None) -> SubsolutionReport:
    """Residual field ma_root(u_t) - [e^{d_t u + F} g]^(1/n) with backward
    time differences for k >= 1 (right differences at k = 0 reported
    separately) plus boundary excess against h.

    ``trace`` supplies u's own boundary values on the sphere (default: the
    problem data h, exact for solver output and the Dirichlet barrier).
    """
    grid = grid or u.space_grid
    tg = u.time_grid
    if tol_pde is None:
        tol_pde = default_slice_tol(grid.h)
    if tol_bc is None:
        tol_bc = default_slice_tol(grid.h)
    if trace is None:
        trace = problem.h.lateral_values
    g_values = problem.g_values(grid)
    n = problem.domain.n
    g_root = g_values ** (1.0 / n)
    t = tg.nodes

    def rhs_field(k, dtu):
        f = problem.F.eval(float(t[k]), grid.nodes, u.values[k])
        return g_root * np.exp(np.clip((dtu + f) / n, -700.0, 700.0))

    min_res, max_res = math.inf, -math.inf
    for k in range(1, tg.K + 1):
        dtu = (u.values[k] - u.values[k - 1]) / (t[k] - t[k - 1])
        lhs = ma_root(u.values[k], grid, dictionary,
                      boundary=lambda pts, k=k: trace(float(t[k]), pts))
        r = lhs - rhs_field(k, dtu)
        min_res = min(min_res, float(np.min(r)))
        max_res = max(max_res, float(np.max(r)))

    dtu0 = (u.values[1] - u.values[0]) / (t[1] - t[0]) if tg.K >= 1 else None
    if dtu0 is not None:
        lhs0 = ma_root(u.values[0], grid, dictionary,
                       boundary=lambda pts: trace(0.0, pts))
        init_min = float(np.min(lhs0 - rhs_field(0, dtu0)))
    else:
        init_min = math.nan

    from cmaflow.domain import lateral_trace_points

    pts = np.unique(np.round(lateral_trace_points(grid), 12), axis=0)
    excess = float(np.max(u.values[0] - problem.h.initial_values(grid)))
    for k in range(tg.K + 1):
        gap = trace(float(t[k]), pts) - problem.h.lateral_values(float(t[k]), pts)
        excess = max(excess, float(np.max(gap)))
    return SubsolutionReport(min_residual=min_res, max_residual=max_res,
                             initial_min_residual=init_min,
                             boundary_excess=excess, tol_pde=tol_pde,
                             tol_bc=tol_bc)


def comparison_check(phi: GridFunction, psi: GridFunction,
                     problem: FlowProblem, dictionary: HermitianDictionary, *,
                     problem_psi: FlowProblem | None = None,
                     trace_phi=None, trace_psi=None,
                     tol_cmp: float | None = None,
                     tol_scale: float = 5.0) -> ComparisonReport:
    """Comparison principle: a subsolution below a supersolution on the
    parabolic boundary stays below it, up to scheme tolerance.

    Preconditions (verified, check skipped on failure): phi passes the
    subsolution residual, psi the supersolution side, the boundary data
    are ordered, and psi's time-semiconcavity estimate is finite.
    """
    problem_psi = problem_psi or problem
    grid, tg = phi.space_grid, phi.time_grid
    if tol_cmp is None:
        tol_cmp = tol_scale * (grid.h + float(np.max(tg.steps)))
    sub = subsolution_residual(phi, problem, dictionary, trace=trace_phi)
    if not sub.passed:
        return ComparisonReport(math.nan, tol_cmp, math.nan, sub, None, math.nan,
                                skipped=True, reason="phi fails the subsolution residual")
    sup = subsolution_residual(psi, problem_psi, dictionary, trace=trace_psi)
    if not sup.supersolution_passed:
        return ComparisonReport(math.nan, tol_cmp, math.nan, sub, sup, math.nan,
                                skipped=True, reason="psi fails the supersolution residual")
    semi = time_semiconcavity_estimate(psi) if tg.K >= 2 else 0.0
    if not math.isfinite(semi):
        return ComparisonReport(math.nan, tol_cmp, math.nan, sub, sup, semi,
                                skipped=True, reason="psi semiconcavity estimate not finite")

    from cmaflow.domain import lateral_trace_points

    pts = np.unique(np.round(lateral_trace_points(grid), 12), axis=0)
    order = float(np.min(problem_psi.h.initial_values(grid)
                         - problem.h.initial_values(grid)))
    for t in tg.nodes:
        order = min(order, float(np.min(
            problem_psi.h.lateral_values(float(t), pts)
            - problem.h.lateral_values(float(t), pts))))
    if order < -1e-10:
        return ComparisonReport(math.nan, tol_cmp, order, sub, sup, semi,
                                skipped=True, reason="boundary data not ordered")
    gap = float(np.max(phi.values - psi.values))
    return ComparisonReport(max_gap=gap, tol_cmp=tol_cmp,
                            boundary_order_margin=order, sub_report=sub,
                            super_report=sup, psi_semiconcavity=semi,
                            skipped=False)


def boundary_attainment_report(u: GridFunction,
                               problem: FlowProblem) -> BoundaryReport:
    """Lateral: max over time nodes and boundary hits of the gap between the
    node value and h at the hit's sphere point.  Initial: L1 distance of the
    first slices to h_0, with the fitted decay rate in t."""
    grid, tg = u.space_grid, u.time_grid
    asm = OperatorAssembly.for_grid(grid)
    lateral = 0.0
    for k, t in enumerate(tg.nodes):
        for (d, s), (ids, pts) in asm.hits.items():
            if len(ids) == 0:
                continue
            hv = problem.h.lateral_values(float(t), pts)
            lateral = max(lateral, float(np.max(np.abs(u.values[k][ids] - hv))))
    h0 = problem.h.initial_values(grid)
    ks = range(1, min(4, tg.K) + 1)
    errs = [float(np.sum(np.abs(u.values[k] - h0))) * grid.cell_volume for k in ks]
    times = [float(tg.nodes[k]) for k in ks]
    if len(errs) >= 2 and min(errs) > 1e-14:
        rate = float(np.polyfit(np.log(times), np.log(errs), 1)[0])
    else:
        rate = math.nan
    return BoundaryReport(lateral_max_error=lateral, initial_l1_errors=errs,
                          initial_times=times, decay_rate=rate)
