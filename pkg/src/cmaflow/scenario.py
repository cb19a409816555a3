"""Scenario configuration: JSON schema parsing, named data families, and
the manufactured-solution generator.

Named families (constant, affine-in-t, radial-quadratic, radial-quartic,
singular density) cover the shipped scenarios without an expression
language; custom data enters as sampled radial tables.  A scenario either
spells out (g, F, h) directly or carries a ``manufactured`` block, in which
case the boundary data and density are generated from the exact solution by
inverting the flow equation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from cmaflow.domain import BallDomain, SpaceGrid, TimeGrid, build_grid
from cmaflow.flow import FlowProblem, FSpec
from cmaflow.ma_ops import HermitianDictionary
from cmaflow.potentials import BoundaryData


class SchemaError(ValueError):
    """Scenario configuration is malformed or violates its declared data
    hypotheses."""


def _require(cond, msg):
    if not cond:
        raise SchemaError(msg)


def _get(d: dict, key: str, kind, default=None, required=False):
    if key not in d:
        _require(not required, f"missing required field {key!r}")
        return default
    v = d[key]
    if kind is float and isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    _require(isinstance(v, kind), f"field {key!r} must be {kind}")
    return v


# ---------------------------------------------------------------------------
# Named families


def _radial(pts: np.ndarray, c0: float, c2: float, c4: float) -> np.ndarray:
    s = np.sum(np.atleast_2d(pts) ** 2, axis=1)
    return c0 + c2 * s + c4 * s * s


def density_from_config(cfg: dict, n: int) -> Callable:
    kind = _get(cfg, "kind", str, required=True)
    if kind == "const":
        v = _get(cfg, "value", float, required=True)
        _require(v >= 0, "constant density must be nonnegative")
        return lambda pts: np.full(len(np.atleast_2d(pts)), v)
    if kind == "radial":
        c0 = _get(cfg, "c0", float, 0.0)
        c2 = _get(cfg, "c2", float, 0.0)
        c4 = _get(cfg, "c4", float, 0.0)
        return lambda pts: _radial(pts, c0, c2, c4)
    if kind == "singular":
        alpha = _get(cfg, "alpha", float, required=True)
        scale = _get(cfg, "scale", float, 1.0)
        dim = 2 * n
        _require(0 < alpha < dim, "singularity exponent must lie in (0, 2n)")
        return lambda pts, h=None: _singular_density(pts, alpha, scale, dim)
    if kind == "expr-table":
        r2 = np.asarray(_get(cfg, "r2", list, required=True), dtype=float)
        vals = np.asarray(_get(cfg, "values", list, required=True), dtype=float)
        _require(len(r2) == len(vals) >= 2, "table needs matching abscissae/values")
        return lambda pts: np.interp(np.sum(np.atleast_2d(pts) ** 2, axis=1), r2, vals)
    raise SchemaError(f"unknown density kind {kind!r}")


def _singular_density(pts, alpha, scale, dim, cell_radius=1e-6):
    r = np.linalg.norm(np.atleast_2d(pts), axis=1)
    out = np.empty_like(r)
    reg = r > cell_radius
    out[reg] = scale * r[reg] ** (-alpha)
    # cell average of r^-alpha over the equal-volume ball around the origin
    out[~reg] = scale * dim / (dim - alpha) * cell_radius ** (-alpha)
    return out


def make_singular_density(alpha: float, scale: float, n: int, h: float) -> Callable:
    """Singular radial density with its origin value replaced by the cell
    average over the equal-volume ball of one lattice cell."""
    dim = 2 * n
    if dim == 2:
        r_c = h / math.sqrt(math.pi)
    else:
        r_c = h * (2.0 / math.pi ** 2) ** 0.25
    return lambda pts: _singular_density(pts, alpha, scale, dim, cell_radius=r_c)


def forcing_from_config(cfg: dict | None) -> FSpec:
    if cfg is None:
        return FSpec(family="zero")
    fam = _get(cfg, "family", str, "zero")
    if fam == "zero":
        return FSpec(family="zero")
    if fam == "affine":
        lam = _get(cfg, "lambda", float, 0.0)
        mu = _get(cfg, "mu", float, 0.0)
        psi_cfg = cfg.get("psi")
        psi = None
        if psi_cfg is not None:
            c0 = _get(psi_cfg, "c0", float, 0.0)
            c2 = _get(psi_cfg, "c2", float, 0.0)
            c4 = _get(psi_cfg, "c4", float, 0.0)
            psi = lambda pts: _radial(pts, c0, c2, c4)
        kappa = _get(cfg, "kappa_F", float, None)
        if kappa is None:
            kappa = max(abs(lam), abs(mu))
        C_F = _get(cfg, "C_F", float, 0.0)
        return FSpec(family="affine", lam=lam, mu=mu, psi=psi, kappa_F=kappa, C_F=C_F)
    raise SchemaError(f"unknown forcing family {fam!r}")


def boundary_from_config(cfg: dict) -> BoundaryData:
    lat_cfg = _get(cfg, "lateral", dict, required=True)
    h0_cfg = _get(cfg, "h0", dict, required=True)
    kappa_h = _get(cfg, "kappa_h", float, required=True)
    C_h = _get(cfg, "C_h", float, required=True)

    fam = _get(lat_cfg, "family", str, required=True)
    if fam == "constant":
        c = _get(lat_cfg, "c", float, required=True)
        lateral = lambda t, pts: np.full(len(np.atleast_2d(pts)), c)
    elif fam == "affine-in-t":
        a = _get(lat_cfg, "a", float, required=True)
        b = _get(lat_cfg, "b", float, 0.0)
        lateral = lambda t, pts: np.full(len(np.atleast_2d(pts)), a + b * t)
    elif fam == "radial-affine-in-t":
        # a(zeta) + b t with a from a radial profile restricted to the sphere
        c0 = _get(lat_cfg, "c0", float, 0.0)
        b = _get(lat_cfg, "b", float, 0.0)
        lateral = lambda t, pts: _radial(pts, c0, 0.0, 0.0) + b * t
    else:
        raise SchemaError(f"unknown lateral family {fam!r}")

    fam0 = _get(h0_cfg, "family", str, required=True)
    if fam0 == "constant":
        c = _get(h0_cfg, "c", float, required=True)
        initial = lambda pts: np.full(len(np.atleast_2d(pts)), c)
    elif fam0 == "radial-quadratic":
        beta = _get(h0_cfg, "beta", float, required=True)
        c = _get(h0_cfg, "c", float, 0.0)
        initial = lambda pts: _radial(pts, c, beta, 0.0)
    elif fam0 == "radial-quartic":
        alpha = _get(h0_cfg, "alpha", float, required=True)
        beta = _get(h0_cfg, "beta", float, 0.0)
        c = _get(h0_cfg, "c", float, 0.0)
        initial = lambda pts: _radial(pts, c, beta, alpha)
    else:
        raise SchemaError(f"unknown initial family {fam0!r}")
    return BoundaryData(lateral=lateral, initial=initial, kappa_h=kappa_h, C_h=C_h)


# ---------------------------------------------------------------------------
# Manufactured solutions


@dataclass
class ManufacturedSolution:
    """Exact reference u*(t, z) = phi(|z|^2) + c_t * t with radial phi."""

    family: str
    coeffs: dict
    c_t: float

    def phi(self, s: np.ndarray):
        if self.family == "quadratic":
            return self.coeffs["beta"] * s
        return self.coeffs["alpha"] * s * s + self.coeffs["beta"] * s

    def phi_prime(self, s):
        if self.family == "quadratic":
            return np.full_like(np.asarray(s, dtype=float), self.coeffs["beta"])
        return 2.0 * self.coeffs["alpha"] * s + self.coeffs["beta"]

    def phi_second(self, s):
        if self.family == "quadratic":
            return np.zeros_like(np.asarray(s, dtype=float))
        return np.full_like(np.asarray(s, dtype=float), 2.0 * self.coeffs["alpha"])

    def __call__(self, t: float, pts: np.ndarray) -> np.ndarray:
        s = np.sum(np.atleast_2d(pts) ** 2, axis=1)
        return self.phi(s) + self.c_t * t

    def hessian_det(self, pts: np.ndarray, n: int) -> np.ndarray:
        """det of the complex Hessian of a radial potential:
        phi'(s)^(n-1) (phi'(s) + s phi''(s))."""
        s = np.sum(np.atleast_2d(pts) ** 2, axis=1)
        return self.phi_prime(s) ** (n - 1) * (self.phi_prime(s) + s * self.phi_second(s))

    def time_lipschitz(self, T: float) -> float:
        return abs(self.c_t) * T


def manufactured_from_config(cfg: dict, n: int) -> ManufacturedSolution:
    fam = _get(cfg, "family", str, required=True)
    if fam == "quadratic":
        beta = _get(cfg, "beta", float, required=True)
        _require(beta > 0, "quadratic reference needs beta > 0")
        c_t = _get(cfg, "c_t", float, n * math.log(beta))
        return ManufacturedSolution(family="quadratic", coeffs={"beta": beta}, c_t=c_t)
    if fam == "radial-quartic":
        alpha = _get(cfg, "alpha", float, required=True)
        beta = _get(cfg, "beta", float, required=True)
        c_t = _get(cfg, "c_t", float, 0.0)
        _require(beta >= 0 and alpha >= 0, "quartic reference needs alpha, beta >= 0")
        return ManufacturedSolution(family="radial-quartic",
                                    coeffs={"alpha": alpha, "beta": beta}, c_t=c_t)
    raise SchemaError(f"unknown manufactured family {fam!r}")


def manufacture(u_star: ManufacturedSolution, F: FSpec, domain: BallDomain,
                T: float, S: float, p: float = 2.0, *,
                grid: SpaceGrid | None = None,
                time_probe: int = 9) -> FlowProblem:
    """Invert the flow equation for the density:

        g(z) = det(complex Hessian of u*) * exp(-d_t u* - F(t, z, u*)),

    evaluated analytically for radial families, with boundary data taken as
    the traces of u*.  Raises SchemaError when the right-hand side is
    genuinely time-dependent (the pair (u*, F) then defines no admissible
    density) or when a slice of u* is not psh.
    """
    n = domain.n

    def g_fn(pts):
        pts = np.atleast_2d(pts)
        det = u_star.hessian_det(pts, n)
        f0 = F.eval(0.0, pts, u_star(0.0, pts))
        return det * np.exp(-u_star.c_t - f0)

    # time-independence check of the inverted density
    probe_pts = np.linspace(0.05, 0.95, 7)[:, None] \
        * np.eye(domain.real_dim)[0][None, :]
    base = g_fn(probe_pts)
    for t in np.linspace(0.0, S, time_probe):
        det = u_star.hessian_det(probe_pts, n)
        f = F.eval(float(t), probe_pts, u_star(float(t), probe_pts))
        gt = det * np.exp(-u_star.c_t - f)
        if np.max(np.abs(gt - base)) > 1e-9 * max(1.0, float(np.max(np.abs(base)))):
            raise SchemaError(
                "inverted density is time-dependent; the reference/forcing pair "
                "does not define an admissible problem")

    s_probe = np.linspace(0.0, 1.0, 33)
    if np.min(u_star.phi_prime(s_probe)) < -1e-12 or \
       np.min(u_star.phi_prime(s_probe) + s_probe * u_star.phi_second(s_probe)) < -1e-12:
        raise SchemaError("reference has a non-psh slice")

    h = BoundaryData(
        lateral=lambda t, pts: u_star(t, pts),
        initial=lambda pts: u_star(0.0, pts),
        kappa_h=abs(u_star.c_t) * T + 1e-12,
        C_h=1e-12,
    )
    return FlowProblem(domain=domain, T=T, S=S, g=g_fn, p=p, F=F, h=h)


# ---------------------------------------------------------------------------
# Scenario


@dataclass
class Scenario:
    """Parsed scenario: problem configuration plus run options."""

    name: str
    n: int
    h_x: float
    K: int
    grading: str
    ratio: float
    T: float
    S: float
    problem_cfg: dict
    manufactured: ManufacturedSolution | None
    checks: list
    tolerances: dict
    solver: dict
    raw: dict = field(repr=False, default_factory=dict)

    DEFAULT_CHECKS = ["residual", "constants", "sandwich", "barriers", "boundary"]

    @classmethod
    def from_dict(cls, data: dict, name: str = "scenario") -> "Scenario":
        _require(isinstance(data, dict), "scenario must be a JSON object")
        dom = _get(data, "domain", dict, required=True)
        n = _get(dom, "n", int, required=True)
        _require(n in (1, 2), "domain.n must be 1 or 2")
        gridc = _get(data, "grid", dict, required=True)
        h_x = _get(gridc, "h_x", float, required=True)
        _require(0 < h_x <= 1, "grid.h_x must lie in (0, 1]")
        K = _get(gridc, "K", int, required=True)
        _require(K >= 1, "grid.K must be at least 1")
        grading = _get(gridc, "grading", str, "uniform")
        ratio = _get(gridc, "ratio", float, 1.2)
        hor = _get(data, "horizon", dict, required=True)
        T = _get(hor, "T", float, required=True)
        S = _get(hor, "S", float, required=True)
        _require(0 < S < T, "need 0 < horizon.S < horizon.T")
        manu = None
        if "manufactured" in data:
            manu = manufactured_from_config(data["manufactured"], n)
        else:
            _require("g" in data and "h" in data,
                     "scenario needs g and h blocks (or a manufactured block)")
        checks = _get(data, "checks", list, None)
        if checks is None:
            checks = list(cls.DEFAULT_CHECKS)
        tol = _get(data, "tolerances", dict, {}) or {}
        solver = _get(data, "solver", dict, {}) or {}
        return cls(name=name, n=n, h_x=h_x, K=K, grading=grading, ratio=ratio,
                   T=T, S=S, problem_cfg=data, manufactured=manu, checks=checks,
                   tolerances=tol, solver=solver, raw=data)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e}") from e
        import os
        return cls.from_dict(data, name=os.path.splitext(os.path.basename(path))[0])

    def build(self, h_x: float | None = None, K: int | None = None):
        """Instantiate (problem, grid, time_grid, dictionary, exact)."""
        h_x = h_x if h_x is not None else self.h_x
        K = K if K is not None else self.K
        domain = BallDomain(self.n)
        grid = build_grid(domain, h_x)
        tgrid = TimeGrid.make(self.T, self.S, K, grading=self.grading,
                              ratio=self.ratio)
        dictionary = HermitianDictionary.build(self.n)
        F = forcing_from_config(self.problem_cfg.get("F"))
        if self.manufactured is not None:
            problem = manufacture(self.manufactured, F, domain, self.T, self.S,
                                  p=_get(self.problem_cfg, "p", float, 2.0))
            exact = self.manufactured
        else:
            gcfg = self.problem_cfg["g"]
            if gcfg.get("kind") == "singular":
                g = make_singular_density(float(gcfg["alpha"]),
                                          float(gcfg.get("scale", 1.0)),
                                          self.n, h_x)
            else:
                g = density_from_config(gcfg, self.n)
            h = boundary_from_config(self.problem_cfg["h"])
            p = _get(self.problem_cfg.get("g", {}), "p", float, 2.0)
            problem = FlowProblem(domain=domain, T=self.T, S=self.S, g=g, p=p,
                                  F=F, h=h)
            exact = None
        return problem, grid, tgrid, dictionary, exact


def parse_ladder(text: str) -> list:
    """Parse a refinement ladder like '1/8,1/16,1/32' into floats."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "/" in part:
            out.append(float(Fraction(part)))
        else:
            out.append(float(part))
    if any(h <= 0 or h > 1 for h in out):
        raise SchemaError("ladder spacings must lie in (0, 1]")
    return out
