"""Structural transforms on candidate solutions, each packaged with a
dominance report against a reference solution.

time scaling      v(t,z) = u(st,z)/s - C |s-1| (t+1)
averaging         v(t,z) = (u(st,z)/s + s u(t/s,z))/2 - C (t+1)(s-1)^2
translation glue  w(t,z) = max(u(t,z), u(t,z+xi) - eta_u) on the overlap
Mobius averaging  v(t,z) = (u(t,T_a(z)) + u(t,T_{-a}(z)))/2

Applied with the constants from the ledger, each transform of a verified
subsolution is again a subsolution lying below the solution; the reports
quantify the margins.  Off-grid evaluations use piecewise-multilinear
interpolation in space and linear interpolation in time, with the
interpolation error folded into the report tolerance via the measured
second differences of the input.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from cmaflow.domain import SpaceGrid, TimeGrid
from cmaflow.potentials import (
    GridFunction,
    default_slice_tol,
    second_time_differences,
)

__all__ = [
    "TransformReport", "SliceInterpolator", "time_scale",
    "semiconcavity_average", "walsh_translate", "mobius_map",
    "mobius_average", "measure_space_modulus",
]


@dataclass
class TransformReport:
    name: str
    dominance_margin: float
    tol: float
    constants: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    residual_report: object | None = None

    @property
    def passed(self) -> bool:
        ok = self.dominance_margin >= -self.tol
        if self.residual_report is not None:
            ok = ok and self.residual_report.passed
        return ok

    def to_dict(self) -> dict:
        out = {"name": self.name, "dominance_margin": self.dominance_margin,
               "tol": self.tol, "constants": self.constants,
               "extras": self.extras, "passed": self.passed}
        if self.residual_report is not None:
            out["residual"] = self.residual_report.to_dict()
        return out


class SliceInterpolator:
    """Piecewise-multilinear interpolation of node fields on the lattice box.

    Points are valid when every corner of their cell is a stored node, so
    values near the sphere are never extrapolated.
    """

    def __init__(self, grid: SpaceGrid):
        self.grid = grid
        dim = grid.domain.real_dim
        m = int(np.max(np.abs(grid.lattice)))
        self.m = m
        shape = (2 * m + 2,) * dim
        box = np.full(shape, -1, dtype=np.int64)
        box[tuple((grid.lattice + m).T)] = np.arange(grid.n_nodes)
        self.box = box
        self.corners = np.array(list(itertools.product((0, 1), repeat=dim)))

    def __call__(self, values: np.ndarray, pts: np.ndarray):
        """Returns (interpolated (m,), valid (m,) bool)."""
        g = self.grid
        q = np.atleast_2d(pts) / g.h + self.m
        base = np.floor(q).astype(np.int64)
        base = np.clip(base, 0, self.box.shape[0] - 2)
        frac = q - base
        out = np.zeros(len(q))
        valid = np.ones(len(q), dtype=bool)
        for corner in self.corners:
            ids = self.box[tuple((base + corner).T)]
            w = np.prod(np.where(corner, frac, 1.0 - frac), axis=1)
            ok = ids >= 0
            valid &= ok | (w <= 1e-14)
            out += w * np.where(ok, values[np.maximum(ids, 0)], 0.0)
        return out, valid


def _interp_tolerance(u: GridFunction) -> float:
    """Tolerance covering interpolation error, scaled by the measured second
    differences of the input."""
    g, tg = u.space_grid, u.time_grid
    scale = 1.0
    if tg.K >= 2:
        scale = max(scale, float(np.max(np.abs(
            second_time_differences(u.values, tg.nodes)))))
    from cmaflow.ma_ops import OperatorAssembly
    asm = OperatorAssembly.for_grid(g)
    mid = u.values[tg.K // 2]
    d2 = asm.second_diffs(mid)
    scale = max(scale, float(np.nanmax(np.abs(d2[: 2 * g.domain.n]))))
    dt = float(np.max(tg.steps))
    return default_slice_tol(g.h) + scale * (g.h ** 2 + dt ** 2)


def _truncated(u: GridFunction, t_max: float) -> tuple[TimeGrid, np.ndarray]:
    tg = u.time_grid
    ks = np.nonzero(tg.nodes <= t_max + 1e-12)[0]
    k_last = int(ks[-1])
    if k_last < 1:
        raise ValueError("scaled times leave the grid for every positive node")
    return (tg if k_last == tg.K else tg.truncate(k_last)), tg.nodes[: k_last + 1]


def _attach_residual(values, grid, tgrid, trace, problem, dictionary, tol):
    if problem is None or dictionary is None or trace is None:
        return None
    from cmaflow.flow import subsolution_residual
    gf = GridFunction(values, grid, tgrid)
    return subsolution_residual(gf, problem, dictionary, trace=trace,
                                tol_pde=tol, tol_bc=tol)


def time_scale(u: GridFunction, s: float, ledger, *, reference=None,
               problem=None, dictionary=None, trace=None):
    """Time-scaling transform v(t,z) = u(st,z)/s - C |s-1| (t+1) with the
    ledger drift constant; returns (GridFunction, TransformReport).

    Scaled times must stay on the grid (linear interpolation in time); for
    s > 1 the output is truncated to the nodes with s*t <= S.
    """
    if s < 0.5:
        raise ValueError("scaling factor must be at least 1/2")
    C = ledger.c_time_scale
    tg_out, t_nodes = _truncated(u, u.time_grid.S / max(s, 1.0))
    vals = np.empty((len(t_nodes), u.space_grid.n_nodes))
    for k, t in enumerate(t_nodes):
        vals[k] = u.slice_at_time(float(s * t)) / s - C * abs(s - 1.0) * (t + 1.0)
    ref = reference if reference is not None else u
    tol = _interp_tolerance(u)
    margin = float(np.min(ref.values[: len(t_nodes)] - vals))
    out_trace = None
    if trace is not None:
        def out_trace(t, pts):
            return trace(float(s * t), pts) / s - C * abs(s - 1.0) * (t + 1.0)
    res = _attach_residual(vals, u.space_grid, tg_out, out_trace, problem,
                           dictionary, tol)
    report = TransformReport(name="time_scale", dominance_margin=margin,
                             tol=tol, constants={"s": s, "C": C},
                             residual_report=res)
    return GridFunction(vals, u.space_grid, tg_out), report


def semiconcavity_average(u: GridFunction, s: float, ledger, *,
                          reference=None, problem=None, dictionary=None,
                          trace=None):
    """Two-sided time average
    v(t,z) = (u(st,z)/s + s u(t/s,z))/2 - C (t+1)(s-1)^2 with the ledger
    averaging constant."""
    if s < 0.5:
        raise ValueError("scaling factor must be at least 1/2")
    C = ledger.c_semiconcave
    tg_out, t_nodes = _truncated(u, u.time_grid.S / max(s, 1.0 / s))
    vals = np.empty((len(t_nodes), u.space_grid.n_nodes))
    for k, t in enumerate(t_nodes):
        vals[k] = 0.5 * (u.slice_at_time(float(s * t)) / s
                         + s * u.slice_at_time(float(t / s))) \
            - C * (t + 1.0) * (s - 1.0) ** 2
    ref = reference if reference is not None else u
    tol = _interp_tolerance(u)
    margin = float(np.min(ref.values[: len(t_nodes)] - vals))
    out_trace = None
    if trace is not None:
        def out_trace(t, pts):
            return 0.5 * (trace(float(s * t), pts) / s + s * trace(float(t / s), pts)) \
                - C * (t + 1.0) * (s - 1.0) ** 2
    res = _attach_residual(vals, u.space_grid, tg_out, out_trace, problem,
                           dictionary, tol)
    report = TransformReport(name="semiconcavity_average",
                             dominance_margin=margin, tol=tol,
                             constants={"s": s, "C": C}, residual_report=res)
    return GridFunction(vals, u.space_grid, tg_out), report


def measure_space_modulus(values_by_slice: np.ndarray, grid: SpaceGrid,
                          delta: float) -> float:
    """Modulus of continuity in space at lag delta, by exhaustive sampling
    of lattice pairs with |z1 - z2| <= delta."""
    interp = SliceInterpolator(grid)
    r = int(math.floor(delta / grid.h + 1e-9))
    if r < 1:
        return 0.0
    dim = grid.domain.real_dim
    eta = 0.0
    vals2d = np.atleast_2d(values_by_slice)
    for offs in itertools.product(range(-r, r + 1), repeat=dim):
        w = np.array(offs)
        if not np.any(w) or np.linalg.norm(w) * grid.h > delta * (1 + 1e-12):
            continue
        shifted = grid.lattice + w
        ok = np.all(np.abs(shifted) <= interp.m, axis=1)
        ids = np.full(grid.n_nodes, -1, dtype=np.int64)
        ids[ok] = interp.box[tuple((shifted[ok] + interp.m).T)]
        pair = ids >= 0
        if not np.any(pair):
            continue
        diffs = np.abs(vals2d[:, np.nonzero(pair)[0]]
                       - vals2d[:, ids[pair]])
        eta = max(eta, float(np.max(diffs)))
    return eta


def walsh_translate(u: GridFunction, xi: np.ndarray, moduli: dict, *,
                    horizon: float | None = None, reference=None):
    """Translation gluing: w = max(u, u(., . + xi) - eta_u) on the overlap,
    u elsewhere, and the verified space-continuity inequality

        u(t, z + xi) - u(t, z) <= eta_u + eta_H + (eta_F + eta_G) T + tol.

    ``moduli`` holds eta_u, eta_H, eta_F, eta_G measured at lag |xi|.
    Returns (GridFunction, TransformReport); the margin is the slack of the
    inequality over all nodes with z + xi interior.
    """
    grid, tg = u.space_grid, u.time_grid
    xi = np.asarray(xi, dtype=float)
    T = horizon if horizon is not None else tg.T
    eta_u = float(moduli["eta_u"])
    rhs_bound = eta_u + float(moduli["eta_H"]) \
        + (float(moduli["eta_F"]) + float(moduli["eta_G"])) * T
    interp = SliceInterpolator(grid)
    shifted_pts = grid.nodes + xi
    vals = u.values.copy()
    worst = -math.inf
    any_overlap = False
    for k in range(tg.K + 1):
        sv, valid = interp(u.values[k], shifted_pts)
        if not np.any(valid):
            continue
        any_overlap = True
        ids = np.nonzero(valid)[0]
        worst = max(worst, float(np.max(sv[ids] - u.values[k][ids])))
        vals[k][ids] = np.maximum(u.values[k][ids], sv[ids] - eta_u)
    if not any_overlap:
        raise ValueError("translation too large: empty overlap with the ball")
    tol = _interp_tolerance(u)
    margin = rhs_bound + tol - worst
    report = TransformReport(
        name="walsh_translate", dominance_margin=margin, tol=tol,
        constants={"xi_norm": float(np.linalg.norm(xi)), **moduli},
        extras={"sup_translated_increment": worst, "rhs_bound": rhs_bound})
    return GridFunction(vals, grid, tg), report


# ---------------------------------------------------------------------------
# Mobius machinery


def _to_complex(pts: np.ndarray, n: int) -> np.ndarray:
    pts = np.atleast_2d(pts)
    return pts[:, 0::2] + 1j * pts[:, 1::2]


def _to_real(z: np.ndarray) -> np.ndarray:
    m, n = z.shape
    out = np.empty((m, 2 * n))
    out[:, 0::2] = z.real
    out[:, 1::2] = z.imag
    return out


def mobius_map(a: np.ndarray, pts: np.ndarray, n: int | None = None) -> np.ndarray:
    """Holomorphic automorphism of the unit ball moving a to the origin:

        T_a(z) = (P_a(z) - a + sqrt(1 - |a|^2) (z - P_a(z))) / (1 - <z, a>),

    with P_a the orthogonal projection onto C a and <., .> the Hermitian
    product.  T_0 is the identity; |T_a(z)| = 1 whenever |z| = 1.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if n is None:
        n = pts.shape[1] // 2
    a = np.asarray(a, dtype=float).reshape(-1)
    az = _to_complex(a.reshape(1, -1), n)[0]
    a2 = float(np.sum(np.abs(az) ** 2))
    if a2 >= 1.0:
        raise ValueError("Mobius center must lie strictly inside the ball")
    z = _to_complex(pts, n)
    if a2 == 0.0:
        return pts.copy()
    inner = z @ az.conj()
    proj = np.outer(inner / a2, az)
    s = math.sqrt(1.0 - a2)
    img = (proj - az[None, :] + s * (z - proj)) / (1.0 - inner)[:, None]
    return _to_real(img)


def mobius_average(u: GridFunction, a: np.ndarray, ledger, *, reference=None):
    """Mobius averaging V_a = (u o T_a + u o T_{-a})/2 with its discrete
    C^{1,1} witness.

    Returns (GridFunction, TransformReport).  The report carries the
    measured drift constant c_mob with
    V_a - (T+1) c_mob |a|^2 <= reference + tol, and the second-difference
    field maximum max 2 (V_a - u)/|a|^2 over nodes whose Mobius images
    interpolate from stored nodes only (the interior subdomain).
    """
    grid, tg = u.space_grid, u.time_grid
    a = np.asarray(a, dtype=float).reshape(-1)
    a_norm = float(np.linalg.norm(a))
    if a_norm > 0.5:
        raise ValueError("Mobius center must satisfy |a| <= 1/2")
    interp = SliceInterpolator(grid)
    if a_norm == 0.0:
        pts_p = pts_m = grid.nodes
    else:
        pts_p = mobius_map(a, grid.nodes, grid.domain.n)
        pts_m = mobius_map(-a, grid.nodes, grid.domain.n)
    vals = u.values.copy()
    T = ledger.T if ledger is not None else tg.T
    tol = _interp_tolerance(u)
    c_mob = 0.0
    field_max, field_min = -math.inf, math.inf
    valid_frac = 1.0
    ref = reference if reference is not None else u
    margin = math.inf
    for k in range(tg.K + 1):
        vp, okp = interp(u.values[k], pts_p)
        vm, okm = interp(u.values[k], pts_m)
        ok = okp & okm
        if not np.any(ok):
            continue
        ids = np.nonzero(ok)[0]
        v = 0.5 * (vp[ids] + vm[ids])
        vals[k][ids] = v
        valid_frac = min(valid_frac, float(np.mean(ok)))
        gap = v - ref.values[k][ids]
        if a_norm > 0:
            c_mob = max(c_mob, float(np.max(gap)) / ((T + 1.0) * a_norm ** 2))
            fld = 2.0 * (v - u.values[k][ids]) / a_norm ** 2
            field_max = max(field_max, float(np.max(fld)))
            field_min = min(field_min, float(np.min(fld)))
        dom = ref.values[k][ids] + tol - (v - (T + 1.0) * max(c_mob, 0.0) * a_norm ** 2)
        margin = min(margin, float(np.min(dom)))
    if a_norm == 0.0:
        margin, c_mob, field_max, field_min = 0.0, 0.0, 0.0, 0.0
    report = TransformReport(
        name="mobius_average", dominance_margin=margin, tol=tol,
        constants={"a_norm": a_norm, "c_mob": c_mob},
        extras={"second_diff_field_max": field_max,
                "second_diff_field_min": field_min,
                "valid_fraction": valid_frac})
    return GridFunction(vals, grid, tg), report
