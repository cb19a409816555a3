"""Unit-ball geometry: masked Cartesian space grid and the time lattice.

The unit ball of C^n is identified with the ball of R^{2n} (coordinates
x_1, y_1, ..., x_n, y_n).  Space is discretized on the lattice h*Z^{2n}
restricted to |p| < 1; the curved boundary is handled by Shortley-Weller
fractional steps: for every stored node and every stencil direction whose
straight neighbor leaves the open ball, we record the fraction theta of a
step at which the segment meets the unit sphere, together with the sphere
point itself (where lateral boundary data is sampled).

Stencil directions cover the 2n coordinate axes and, because the Hermitian
dictionary operators need mixed second derivatives, the diagonals of every
coordinate plane.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

INTERIOR = 0
NEAR_BOUNDARY = 1

_SPHERE_TOL = 1e-12


class GridError(ValueError):
    """Raised when a grid cannot be built (e.g. too coarse)."""


@dataclass(frozen=True)
class BallDomain:
    """The euclidean unit ball of C^n, n in {1, 2}.

    The defining function rho0(z) = |z|^2 - 1 is kept as an explicit field
    so that a later extension to other strictly pseudoconvex domains only
    touches this module.
    """

    n: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError(f"complex dimension must be 1 or 2, got {self.n}")

    @property
    def real_dim(self) -> int:
        return 2 * self.n

    def rho0(self, points: np.ndarray) -> np.ndarray:
        """Defining function |z|^2 - 1; negative inside, zero on the sphere."""
        pts = np.atleast_2d(points)
        return np.sum(pts * pts, axis=-1) - 1.0


def stencil_directions(real_dim: int) -> np.ndarray:
    """Unsigned stencil offsets: axes first, then plane diagonals.

    Returns an integer array of shape (n_dirs, real_dim).  Each row v is
    used with both signs; the second difference along v approximates the
    directional second derivative per unit length (offsets of squared
    length 1 or 2).
    """
    dirs = [np.eye(real_dim, dtype=np.int64)[a] for a in range(real_dim)]
    for a, b in itertools.combinations(range(real_dim), 2):
        for sb in (+1, -1):
            v = np.zeros(real_dim, dtype=np.int64)
            v[a], v[b] = 1, sb
            dirs.append(v)
    return np.array(dirs, dtype=np.int64)


def _boundary_theta(p: np.ndarray, step: np.ndarray) -> float:
    """Fraction theta in (0, 1] with |p + theta*step| = 1 (p strictly inside)."""
    a = float(step @ step)
    b = 2.0 * float(p @ step)
    c = float(p @ p) - 1.0
    disc = b * b - 4.0 * a * c
    theta = (-b + math.sqrt(max(disc, 0.0))) / (2.0 * a)
    return theta


@dataclass
class SpaceGrid:
    """Lattice nodes strictly inside the unit ball plus boundary bookkeeping.

    Arrays are indexed by node id.  For every unsigned direction d and sign
    s in {+, -}: ``neighbor[(d, s)][i]`` is the node id of the straight
    neighbor, or -1 when the arm crosses (or touches) the sphere, in which
    case ``theta[(d, s)][i]`` in (0, 1] and ``sphere_point[(d, s)][i]`` hold
    the Shortley-Weller data.  Immutable after construction.
    """

    domain: BallDomain
    h: float
    nodes: np.ndarray              # (N, 2n) float, node coordinates
    lattice: np.ndarray            # (N, 2n) int, node coordinates / h
    mask: np.ndarray               # (N,) int8, INTERIOR or NEAR_BOUNDARY
    directions: np.ndarray         # (n_dirs, 2n) int, unsigned offsets
    neighbor: dict = field(repr=False)      # (d, sign) -> (N,) int32
    theta: dict = field(repr=False)         # (d, sign) -> (N,) float64
    sphere_point: dict = field(repr=False)  # (d, sign) -> (N, 2n) float64 (NaN if no hit)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dirs(self) -> int:
        return len(self.directions)

    @property
    def interior_ids(self) -> np.ndarray:
        return np.nonzero(self.mask == INTERIOR)[0]

    @property
    def cell_volume(self) -> float:
        return self.h ** self.domain.real_dim

    @property
    def lattice_volume(self) -> float:
        """Mask-weighted volume: every stored node carries one full cell."""
        return self.n_nodes * self.cell_volume

    def stencil_complete(self, dirs: np.ndarray | None = None) -> np.ndarray:
        """Boolean mask of nodes whose arms (for the given unsigned direction
        ids, default all) end on stored nodes, so operators evaluate without
        boundary data."""
        if dirs is None:
            dirs = np.arange(self.n_dirs)
        ok = np.ones(self.n_nodes, dtype=bool)
        for d in dirs:
            ok &= (self.neighbor[(int(d), +1)] >= 0) & (self.neighbor[(int(d), -1)] >= 0)
        return ok

    def boundary_hits(self):
        """All (node_id, direction_id, sign, theta, sphere_point) records."""
        out = []
        for d in range(self.n_dirs):
            for s in (+1, -1):
                ids = np.nonzero(self.neighbor[(d, s)] < 0)[0]
                for i in ids:
                    out.append((int(i), d, s, float(self.theta[(d, s)][i]),
                                self.sphere_point[(d, s)][i].copy()))
        return out

    def node_id(self, lattice_point) -> int:
        """Node id of an integer lattice point, or -1."""
        return self._index.get(tuple(int(k) for k in lattice_point), -1)

    def to_json(self) -> str:
        """Geometry dump for debugging and golden tests."""
        hits = [
            {"node": i, "direction": self.directions[d].tolist(), "sign": s,
             "theta": th, "sphere_point": [float(v) for v in pt]}
            for (i, d, s, th, pt) in self.boundary_hits()
        ]
        tags = np.where(self.mask == INTERIOR, "interior", "near-boundary")
        return json.dumps({
            "n": self.domain.n,
            "h_x": self.h,
            "nodes": self.nodes.tolist(),
            "mask": tags.tolist(),
            "boundary_hits": hits,
        })


def build_grid(domain: BallDomain, h_x: float) -> SpaceGrid:
    """Build the masked lattice grid with Shortley-Weller boundary data.

    A lattice point p = h*k is stored iff |p| < 1.  A stored node is
    interior when all 2n axis neighbors lie in the closed ball, otherwise
    near-boundary.  Raises ``GridError`` when no interior node exists.
    """
    if not 0.0 < h_x <= 1.0:
        raise GridError(f"spacing must lie in (0, 1], got {h_x}")
    dim = domain.real_dim
    m = int(math.floor((1.0 + _SPHERE_TOL) / h_x))
    axes = [np.arange(-m, m + 1)] * dim
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    pts = lattice * h_x
    r2 = np.sum(pts * pts, axis=1)
    inside = r2 < 1.0 - _SPHERE_TOL
    lattice = lattice[inside]
    pts = pts[inside]
    order = np.lexsort(lattice.T[::-1])
    lattice, pts = lattice[order], pts[order]
    index = {tuple(k): i for i, k in enumerate(map(tuple, lattice.tolist()))}

    n_nodes = len(pts)
    dirs = stencil_directions(dim)

    # Mask: interior iff every axis neighbor lies in the closed ball.
    mask = np.full(n_nodes, INTERIOR, dtype=np.int8)
    for a in range(dim):
        for s in (+1, -1):
            q = pts.copy()
            q[:, a] += s * h_x
            outside_closed = np.sum(q * q, axis=1) > 1.0 + _SPHERE_TOL
            mask[outside_closed] = NEAR_BOUNDARY
    if not np.any(mask == INTERIOR):
        raise GridError(f"grid too coarse: no interior node at h_x={h_x}")

    # dense lattice-to-id box for vectorized neighbor lookups
    box = np.full(((2 * m + 3),) * dim, -1, dtype=np.int64)
    box[tuple((lattice + m + 1).T)] = np.arange(n_nodes)

    neighbor, theta, sphere = {}, {}, {}
    for d, v in enumerate(dirs):
        for s in (+1, -1):
            offs = (s * v).astype(np.int64)
            shifted = lattice + offs + m + 1
            nb = box[tuple(shifted.T)].astype(np.int32)
            th = np.ones(n_nodes, dtype=np.float64)
            sp = np.full((n_nodes, dim), np.nan)
            miss = nb < 0
            if np.any(miss):
                step = offs.astype(float) * h_x
                a = float(step @ step)
                b = 2.0 * (pts[miss] @ step)
                c = np.sum(pts[miss] ** 2, axis=1) - 1.0
                disc = np.maximum(b * b - 4.0 * a * c, 0.0)
                t = (-b + np.sqrt(disc)) / (2.0 * a)
                pt = pts[miss] + t[:, None] * step[None, :]
                nrm = np.linalg.norm(pt, axis=1)
                pt = pt / nrm[:, None]
                th[miss] = t
                sp[miss] = pt
            neighbor[(d, s)] = nb
            theta[(d, s)] = th
            sphere[(d, s)] = sp

    grid = SpaceGrid(domain=domain, h=h_x, nodes=pts, lattice=lattice, mask=mask,
                     directions=dirs, neighbor=neighbor, theta=theta, sphere_point=sphere)
    grid._index = index
    return grid


def lateral_trace_points(grid: SpaceGrid) -> np.ndarray:
    """Sphere points, one per boundary hit, where lateral data h(t, .) is
    sampled.  Shape (n_hits, 2n)."""
    pts = [pt for (_, _, _, _, pt) in grid.boundary_hits()]
    if not pts:
        return np.zeros((0, grid.domain.real_dim))
    return np.array(pts)


@dataclass(frozen=True)
class TimeGrid:
    """Nodes t_0 = 0 < t_1 < ... < t_K = S <= T.

    Grading "geometric" refines toward t = 0 with consecutive-step ratio
    bounded in [1, 2], resolving the t*log(t) behavior of the Cauchy
    barrier near the initial time.
    """

    T: float
    nodes: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.nodes, dtype=float)
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("time nodes must start at 0 and increase strictly")
        if t[-1] > self.T + 1e-12:
            raise ValueError("final time node exceeds the horizon T")
        object.__setattr__(self, "nodes", t)

    @classmethod
    def make(cls, T: float, S: float, K: int, grading: str = "uniform",
             ratio: float = 1.2) -> "TimeGrid":
        if not 0 < S <= T:
            raise ValueError("need 0 < S <= T")
        if K < 1:
            raise ValueError("need at least one time step")
        if grading == "uniform":
            nodes = np.linspace(0.0, S, K + 1)
        elif grading == "geometric":
            if not 1.0 <= ratio <= 2.0:
                raise ValueError("grading ratio must lie in [1, 2]")
            if ratio == 1.0:
                nodes = np.linspace(0.0, S, K + 1)
            else:
                steps = ratio ** np.arange(K)
                steps *= S / steps.sum()
                nodes = np.concatenate([[0.0], np.cumsum(steps)])
                nodes[-1] = S
        else:
            raise ValueError(f"unknown grading {grading!r}")
        return cls(T=T, nodes=nodes)

    @property
    def S(self) -> float:
        return float(self.nodes[-1])

    @property
    def K(self) -> int:
        return len(self.nodes) - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    def truncate(self, k_last: int) -> "TimeGrid":
        """Time grid restricted to nodes t_0..t_{k_last}."""
        if not 1 <= k_last <= self.K:
            raise ValueError("truncation index out of range")
        return TimeGrid(T=self.T, nodes=self.nodes[: k_last + 1].copy())
