"""Grid representation of parabolic potentials and the quantitative slice
checks: discrete plurisubharmonicity, time-Lipschitz and time-semiconcavity
estimators, the approximate sub-mean inequality, and the slice L1 bound.

A parabolic potential is, at grid scale, a finite real array over
(time node, space node) whose slices pass the discrete psh test and whose
time increments are controlled.  All checks here are pure functions.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from cmaflow.domain import SpaceGrid, TimeGrid


def default_slice_tol(h_x: float) -> float:
    """Default tolerance for slice checks; second-difference discretization
    error dominates."""
    return 10.0 * h_x * h_x + 1e-9


@dataclass
class GridFunction:
    """Real values sampled on (time node, space node).

    ``values`` has shape (K+1, N) over the stored (interior plus
    near-boundary) space nodes.  Values must be finite: the -infinity locus
    of unbounded psh functions is excluded at grid scale.
    """

    values: np.ndarray
    space_grid: SpaceGrid
    time_grid: TimeGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        expected = (self.time_grid.K + 1, self.space_grid.n_nodes)
        if v.shape != expected:
            raise ValueError(f"values shape {v.shape} does not match grids {expected}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        self.values = v

    @classmethod
    def from_callable(cls, fn: Callable, space_grid: SpaceGrid,
                      time_grid: TimeGrid) -> "GridFunction":
        """Sample fn(t, points)->(N,) on the space-time lattice."""
        rows = [np.asarray(fn(float(t), space_grid.nodes), dtype=float)
                for t in time_grid.nodes]
        return cls(np.stack(rows), space_grid, time_grid)

    def slice(self, k: int) -> np.ndarray:
        return self.values[k]

    def slice_at_time(self, t: float) -> np.ndarray:
        """Linear interpolation between time slices."""
        tn = self.time_grid.nodes
        if t < tn[0] - 1e-12 or t > tn[-1] + 1e-12:
            raise ValueError(f"time {t} outside grid [{tn[0]}, {tn[-1]}]")
        t = min(max(t, tn[0]), tn[-1])
        k = int(np.searchsorted(tn, t, side="right")) - 1
        k = min(k, len(tn) - 2)
        w = (t - tn[k]) / (tn[k + 1] - tn[k])
        return (1 - w) * self.values[k] + w * self.values[k + 1]

    def l1_slice_norm(self, k: int) -> float:
        """Mask-weighted lattice L1 norm of slice k over the ball."""
        return float(np.sum(np.abs(self.values[k]))) * self.space_grid.cell_volume

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        dim = self.space_grid.domain.real_dim
        w.writerow(["k", "t_k", "node_index"] + [f"x{a}" for a in range(dim)] + ["value"])
        for k, t in enumerate(self.time_grid.nodes):
            for i in range(self.space_grid.n_nodes):
                coords = [f"{c:.17g}" for c in self.space_grid.nodes[i]]
                w.writerow([k, f"{t:.17g}", i] + coords + [f"{self.values[k, i]:.17g}"])
        return buf.getvalue()

    def metadata_json(self) -> str:
        g, tg = self.space_grid, self.time_grid
        return json.dumps({
            "n": g.domain.n, "h_x": g.h, "n_nodes": g.n_nodes,
            "T": tg.T, "S": tg.S, "K": tg.K,
            "time_nodes": [float(t) for t in tg.nodes],
        })


def grid_function_from_csv(text: str, space_grid: SpaceGrid,
                           time_grid: TimeGrid) -> GridFunction:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    values = np.full((time_grid.K + 1, space_grid.n_nodes), np.nan)
    for row in body:
        values[int(row[0]), int(row[2])] = float(row[-1])
    return GridFunction(values, space_grid, time_grid)


@dataclass
class PshReport:
    min_margin: float
    worst_node: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.min_margin >= -self.tol


def psh_check(slice_values: np.ndarray, grid: SpaceGrid, dictionary,
              tol: float | None = None) -> PshReport:
    """Discrete plurisubharmonicity test for one space slice.

    Computes min over nodes and dictionary matrices A of Delta_A(slice) on
    interior nodes whose stencils close without boundary data; passes iff
    the minimum margin is >= -tol.  This is a necessary condition at grid
    scale, matching the Hermitian-Laplacian characterization that drives
    the Monge-Ampere discretization.
    """
    from cmaflow.ma_ops import OperatorAssembly

    if tol is None:
        tol = default_slice_tol(grid.h)
    asm = OperatorAssembly.for_grid(grid)
    fields = asm.delta_fields(slice_values, dictionary)
    margins = fields.min(axis=0)
    ok = grid.stencil_complete(dictionary.required_directions(grid)) \
        & (grid.mask == 0)
    if not np.any(ok):
        raise ValueError("no node admits a complete closure-free stencil")
    ids = np.nonzero(ok)[0]
    sub = margins[ids]
    worst = int(ids[np.argmin(sub)])
    return PshReport(min_margin=float(np.min(sub)), worst_node=worst, tol=tol)


def time_lipschitz_estimate(u: GridFunction, weighted: bool = True) -> float:
    """Discrete supremum of t * |d_t u| (or plain |d_t u| with
    weighted=False) over difference quotients on [t_1, t_K]."""
    t = u.time_grid.nodes
    if len(t) < 2:
        raise ValueError("need at least two time nodes")
    dq = np.abs(np.diff(u.values, axis=0)) / np.diff(t)[:, None]
    if not weighted:
        return float(np.max(dq))
    if len(t) < 3:
        return 0.0
    # quotient on [t_k, t_{k+1}] weighted by its left endpoint, k >= 1
    return float(np.max(t[1:-1, None] * dq[1:]))


def time_semiconcavity_estimate(u: GridFunction) -> float:
    """Discrete supremum of t^2 * d_t^2 u over interior time triples.

    Uses the nonuniform three-point second difference, exact on quadratics
    in t; a positive value quantifies a semi-concavity violation.
    """
    t = u.time_grid.nodes
    if len(t) < 3:
        raise ValueError("need at least three time nodes")
    d2 = second_time_differences(u.values, t)
    return float(np.max(t[1:-1, None] ** 2 * d2))


def second_time_differences(values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Three-point second differences at interior time nodes, shape (K-1, N)."""
    dm = np.diff(t)[:-1]      # t_k - t_{k-1}
    dp = np.diff(t)[1:]       # t_{k+1} - t_k
    um, uc, up = values[:-2], values[1:-1], values[2:]
    num = dm[:, None] * up - (dm + dp)[:, None] * uc + dp[:, None] * um
    return 2.0 * num / (dm * dp * (dm + dp))[:, None]


@dataclass
class SubmeanReport:
    margin: float
    average: float
    center_value: float
    kappa0: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.margin >= -self.tol


def submean_check(u: GridFunction, t0: float, z0: np.ndarray, eps: float,
                  r: float, tol: float | None = None) -> SubmeanReport:
    """Approximate sub-mean inequality over the tube
    [t0-eps, t0+eps] x B(z0, r).

    margin = (space-time lattice average of u over the tube)
             + kappa0 * eps - u(t0, z0),
    where kappa0 is the plain time-Lipschitz constant of u on the time
    window.  Passes iff margin >= -tol.
    """
    grid, tg = u.space_grid, u.time_grid
    if tol is None:
        tol = default_slice_tol(grid.h)
    z0 = np.asarray(z0, dtype=float)
    t = tg.nodes
    kmask = (t >= t0 - eps - 1e-12) & (t <= t0 + eps + 1e-12)
    ks = np.nonzero(kmask)[0]
    if len(ks) == 0 or t0 - eps < -1e-12 or t0 + eps > tg.S + 1e-12:
        raise ValueError("time window exits the grid")
    dist2 = np.sum((grid.nodes - z0) ** 2, axis=1)
    ball = dist2 <= r * r + 1e-12
    if not np.any(ball):
        raise ValueError("space ball contains no node")
    if np.linalg.norm(z0) + r > 1.0 + 1e-12:
        raise ValueError("space ball exits the unit ball")

    # trapezoid weights in time, uniform cell weights in space
    tw = np.zeros(len(ks))
    tk = t[ks]
    if len(ks) == 1:
        tw[0] = 1.0
    else:
        mid = 0.5 * (tk[1:] + tk[:-1])
        edges = np.concatenate([[tk[0]], mid, [tk[-1]]])
        tw = np.diff(edges)
    spatial_mean = u.values[np.ix_(ks, np.nonzero(ball)[0])].mean(axis=1)
    average = float(np.sum(tw * spatial_mean) / np.sum(tw))

    # plain Lipschitz constant on the window (single-slice windows: 0)
    if len(ks) >= 2:
        win = GridFunction(u.values[ks], grid, TimeGrid(T=tg.T, nodes=tk - tk[0])
                           if tk[0] == 0 else _shifted_time(tg.T, tk))
        kappa0 = time_lipschitz_estimate(win, weighted=False)
    else:
        kappa0 = 0.0

    center = float(u.slice_at_time(t0)[_nearest_node(grid, z0)])
    margin = average + kappa0 * eps - center
    return SubmeanReport(margin=margin, average=average, center_value=center,
                         kappa0=kappa0, tol=tol)


def _shifted_time(T: float, tk: np.ndarray) -> TimeGrid:
    return TimeGrid(T=T, nodes=tk - tk[0])


def _nearest_node(grid: SpaceGrid, z0: np.ndarray) -> int:
    d2 = np.sum((grid.nodes - z0) ** 2, axis=1)
    i = int(np.argmin(d2))
    if d2[i] > 1e-18:
        raise ValueError("tube center must be a grid node")
    return i


@dataclass
class SliceL1Report:
    lhs: float
    rhs: float
    kappa: float
    big_m: float
    volume: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + self.tol) + 1e-12


def slice_l1_bound_check(u: GridFunction, v: GridFunction, T0: float, T1: float,
                         S: float, tol: float = 1e-9) -> SliceL1Report:
    """Slice L1 norm against the global L1 norm:

    max_{t in [T0,T1]} ||u_t - v_t||_{L1}  <=
        2 M max{ ||u-v||_{L1(Omega_{T1})}^{1/2}, ||u-v||_{L1(Omega_{T1})} },

    with M = max{ sqrt(kappa Vol), 1/(S-T1) } and kappa the plain
    time-Lipschitz constant of u - v on [T0, S].
    """
    if u.space_grid is not v.space_grid or u.time_grid is not v.time_grid:
        if u.values.shape != v.values.shape:
            raise ValueError("functions must share grids")
    t = u.time_grid.nodes
    if not (0.0 < T0 < T1 < S <= u.time_grid.S + 1e-12):
        raise ValueError("need 0 < T0 < T1 < S within the grid horizon")

    grid = u.space_grid
    diff = u.values - v.values
    vol = grid.lattice_volume
    slice_l1 = np.sum(np.abs(diff), axis=1) * grid.cell_volume

    window = (t >= T0 - 1e-12) & (t <= T1 + 1e-12)
    lhs = float(np.max(slice_l1[window]))

    # global L1 over (0, T1) x Omega by trapezoid in time
    upto = t <= T1 + 1e-12
    tt = t[upto]
    global_l1 = float(np.trapezoid(slice_l1[upto], tt))

    lipwin = (t >= T0 - 1e-12) & (t <= S + 1e-12)
    ks = np.nonzero(lipwin)[0]
    dwin = GridFunction(diff[ks], grid, _shifted_time(u.time_grid.T, t[ks]))
    kappa = time_lipschitz_estimate(dwin, weighted=False)

    big_m = max(math.sqrt(max(kappa, 0.0) * vol), 1.0 / (S - T1))
    rhs = 2.0 * big_m * max(math.sqrt(global_l1), global_l1)
    return SliceL1Report(lhs=lhs, rhs=rhs, kappa=kappa, big_m=big_m,
                         volume=vol, tol=tol)


@dataclass
class BoundaryData:
    """Cauchy-Dirichlet data: lateral sampler on the sphere plus initial
    slice, with declared time-regularity constants.

    ``lateral(t, pts)`` evaluates h on sphere points, ``initial(pts)``
    evaluates h_0 anywhere in the closed ball.  ``kappa_h`` bounds
    t*|d_t h| and ``C_h`` bounds t^2*d_t^2 h; both are hypotheses on the
    data, declared by the caller and verified here by sampling.
    """

    lateral: Callable
    initial: Callable
    kappa_h: float
    C_h: float

    def initial_values(self, grid: SpaceGrid) -> np.ndarray:
        return np.asarray(self.initial(grid.nodes), dtype=float)

    def lateral_values(self, t: float, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self.lateral(float(t), pts), dtype=float)

    def validate(self, grid: SpaceGrid, time_grid: TimeGrid, dictionary,
                 n_probe: int = 65) -> None:
        """Check finiteness, t=0 compatibility, declared constants, and
        plurisubharmonicity of the initial slice.  Raises ValueError with
        the offending sample on failure."""
        from cmaflow.domain import lateral_trace_points

        pts = lateral_trace_points(grid)
        if len(pts) == 0:
            raise ValueError("grid exposes no boundary hits")
        pts = np.unique(np.round(pts, 12), axis=0)
        probe_t = np.union1d(time_grid.nodes,
                             np.linspace(0.0, time_grid.T, n_probe))
        for t in probe_t:
            vals = self.lateral_values(t, pts)
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"lateral data not finite at t={t}")
        gap = np.abs(self.lateral_values(0.0, pts)
                     - np.asarray(self.initial(pts), dtype=float))
        if np.max(gap) > 1e-10:
            j = int(np.argmax(gap))
            raise ValueError(
                f"initial/lateral compatibility violated at zeta={pts[j]}: gap={gap[j]:.3e}")

        self._verify_time_constants(pts, time_grid.T)

        rep = psh_check(self.initial_values(grid), grid, dictionary)
        if not rep.passed:
            raise ValueError(
                f"initial data fails the psh test: margin={rep.min_margin:.3e} "
                f"at node {rep.worst_node}")

    def _verify_time_constants(self, pts: np.ndarray, T: float,
                               slack: float = 1e-6) -> None:
        ts = np.linspace(T / 64.0, T * (1.0 - 2e-3), 33)
        dt1, dt2 = T * 1e-5, T * 1e-3
        for t in ts:
            d1 = np.max(np.abs(self.lateral_values(t + dt1, pts)
                               - self.lateral_values(t - dt1, pts))) / (2 * dt1)
            if t * d1 > self.kappa_h * (1 + slack) + 1e-8:
                raise ValueError(
                    f"declared kappa_h={self.kappa_h} violated: t|d_t h|={t * d1:.6g} at t={t}")
            d2 = np.max(self.lateral_values(t + dt2, pts)
                        - 2 * self.lateral_values(t, pts)
                        + self.lateral_values(t - dt2, pts)) / dt2 ** 2
            if t * t * d2 > self.C_h * (1 + slack) + 1e-6:
                raise ValueError(
                    f"declared C_h={self.C_h} violated: t^2 d_t^2 h={t * t * d2:.6g} at t={t}")
