import math

import numpy as np
import pytest

from cmaflow.domain import BallDomain, TimeGrid, build_grid
from cmaflow.flow import FlowProblem, FSpec
from cmaflow.ma_ops import HermitianDictionary
from cmaflow.potentials import BoundaryData


@pytest.fixture(scope="session")
def dict1():
    return HermitianDictionary.build(1)


@pytest.fixture(scope="session")
def dict2():
    return HermitianDictionary.build(2)


@pytest.fixture(scope="session")
def disc_grid_8():
    return build_grid(BallDomain(1), 1 / 8)


@pytest.fixture(scope="session")
def disc_grid_16():
    return build_grid(BallDomain(1), 1 / 16)


@pytest.fixture(scope="session")
def ball2_grid_4():
    return build_grid(BallDomain(2), 1 / 4)


@pytest.fixture(scope="session")
def ball2_grid_8():
    return build_grid(BallDomain(2), 1 / 8)


def quadratic_reference(n, beta, c_t=None):
    """u*(t, z) = beta |z|^2 + c_t t, c_t defaulting to n log beta (unit
    density for zero forcing)."""
    if c_t is None:
        c_t = n * math.log(beta)

    def u_star(t, pts):
        return beta * np.sum(np.atleast_2d(pts) ** 2, axis=1) + c_t * t

    return u_star, c_t


def quadratic_problem(n, beta, T=1.0, S=0.75, forcing=None, c_t=None):
    """Manufactured problem with exact solution beta |z|^2 + c_t t and unit
    density (zero forcing)."""
    u_star, c_t = quadratic_reference(n, beta, c_t)
    h = BoundaryData(lateral=lambda t, pts: u_star(t, pts),
                     initial=lambda pts: u_star(0.0, pts),
                     kappa_h=abs(c_t) * T + 1e-9, C_h=1e-9)
    g = lambda pts: np.ones(len(np.atleast_2d(pts)))
    return FlowProblem(domain=BallDomain(n), T=T, S=S, g=g, p=2.0,
                       F=forcing or FSpec(), h=h), u_star


@pytest.fixture(scope="session")
def disc_problem():
    problem, u_star = quadratic_problem(1, 2.0)
    return problem, u_star


@pytest.fixture(scope="session")
def disc_solution(disc_problem, disc_grid_8, dict1):
    from cmaflow.flow import solve_flow

    problem, u_star = disc_problem
    tgrid = TimeGrid.make(1.0, 0.75, 12)
    result = solve_flow(problem, (disc_grid_8, tgrid), dict1)
    return problem, u_star, tgrid, result
