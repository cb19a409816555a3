import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmaflow.domain import BallDomain, TimeGrid, build_grid
from cmaflow.potentials import (
    BoundaryData,
    GridFunction,
    grid_function_from_csv,
    psh_check,
    second_time_differences,
    slice_l1_bound_check,
    submean_check,
    time_lipschitz_estimate,
    time_semiconcavity_estimate,
)


def gf_from(fn, grid, tgrid):
    return GridFunction.from_callable(fn, grid, tgrid)


def r2(pts):
    return np.sum(np.atleast_2d(pts) ** 2, axis=1)


# ---------------------------------------------------------------------------
# GridFunction basics


def test_grid_function_shape_and_finiteness(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.5, 4)
    with pytest.raises(ValueError):
        GridFunction(np.zeros((3, disc_grid_8.n_nodes)), disc_grid_8, tg)
    bad = np.zeros((5, disc_grid_8.n_nodes))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        GridFunction(bad, disc_grid_8, tg)


def test_csv_round_trip(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.5, 3)
    u = gf_from(lambda t, pts: r2(pts) + t, disc_grid_8, tg)
    v = grid_function_from_csv(u.to_csv(), disc_grid_8, tg)
    np.testing.assert_array_equal(u.values, v.values)


# ---------------------------------------------------------------------------
# psh check


def test_psh_check_quadratic(disc_grid_8, dict1):
    rep = psh_check(r2(disc_grid_8.nodes), disc_grid_8, dict1)
    assert rep.min_margin == pytest.approx(1.0, abs=1e-10)
    assert rep.passed


def test_psh_check_negative_quadratic(disc_grid_8, dict1):
    rep = psh_check(-r2(disc_grid_8.nodes), disc_grid_8, dict1)
    assert rep.min_margin == pytest.approx(-1.0, abs=1e-10)
    assert not rep.passed


def test_psh_check_pluriharmonic(disc_grid_8, dict1):
    x, y = disc_grid_8.nodes[:, 0], disc_grid_8.nodes[:, 1]
    rep = psh_check(x * x - y * y, disc_grid_8, dict1)
    assert rep.min_margin == pytest.approx(0.0, abs=1e-10)
    assert rep.passed


def test_psh_check_n2(ball2_grid_4, dict2):
    rep = psh_check(r2(ball2_grid_4.nodes), ball2_grid_4, dict2)
    assert rep.min_margin == pytest.approx(1.0, abs=1e-10)


def test_psh_margin_max_stability(disc_grid_8, dict1):
    """Margins of max(u, v) dominate the active branch's margin nodewise."""
    from cmaflow.ma_ops import OperatorAssembly

    grid = disc_grid_8
    u = r2(grid.nodes)
    v = 0.5 * r2(grid.nodes) + 0.11
    asm = OperatorAssembly.for_grid(grid)
    fu = asm.delta_fields(u, dict1).min(axis=0)
    fv = asm.delta_fields(v, dict1).min(axis=0)
    fm = asm.delta_fields(np.maximum(u, v), dict1).min(axis=0)
    ok = grid.stencil_complete(dict1.required_directions(grid))
    assert np.all(fm[ok] >= np.minimum(fu, fv)[ok] - 1e-12)
    # where one branch strictly dominates on the whole stencil ball the
    # margin is exactly that branch's margin
    strict_u = u - v > 2 * grid.h * 2.0  # gradient bound times stencil radius
    sel = ok & strict_u
    if np.any(sel):
        np.testing.assert_allclose(fm[sel], fu[sel], atol=1e-12)


# ---------------------------------------------------------------------------
# time estimates


def test_time_lipschitz_linear(disc_grid_8):
    tg = TimeGrid.make(1.0, 1.0, 4)
    alpha = math.log(2.0)
    u = gf_from(lambda t, pts: alpha * t + 0 * r2(pts), disc_grid_8, tg)
    assert time_lipschitz_estimate(u) == pytest.approx(0.75 * alpha, rel=1e-12)


def test_time_lipschitz_constant(disc_grid_8):
    tg = TimeGrid.make(1.0, 1.0, 4)
    u = gf_from(lambda t, pts: r2(pts), disc_grid_8, tg)
    assert time_lipschitz_estimate(u) == 0.0


def test_time_lipschitz_log_on_graded(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.75, 24, grading="geometric", ratio=1.2)
    dt_min = tg.steps[0]
    u = gf_from(lambda t, pts: math.log(t + dt_min) + 0 * r2(pts), disc_grid_8, tg)
    # mean value bound: t_k |log'| <= t_k/(t_k + dt_min) <= 1, plus grading slack
    assert time_lipschitz_estimate(u) <= 1.0 + 0.25


def test_time_lipschitz_single_slice_errors(disc_grid_8):
    tg = TimeGrid(T=1.0, nodes=np.array([0.0]))
    u = GridFunction(np.zeros((1, disc_grid_8.n_nodes)), disc_grid_8, tg)
    with pytest.raises(ValueError):
        time_lipschitz_estimate(u)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 8), st.integers(0, 10 ** 6))
def test_time_lipschitz_subadditive(k_steps, seed):
    rng = np.random.default_rng(seed)
    grid = build_grid(BallDomain(1), 0.5)
    tg = TimeGrid.make(1.0, 0.9, k_steps)
    a = rng.normal(size=(k_steps + 1, grid.n_nodes))
    b = rng.normal(size=(k_steps + 1, grid.n_nodes))
    eu = time_lipschitz_estimate(GridFunction(a, grid, tg))
    ev = time_lipschitz_estimate(GridFunction(b, grid, tg))
    es = time_lipschitz_estimate(GridFunction(a + b, grid, tg))
    assert es <= eu + ev + 1e-12


def test_semiconcavity_affine_zero(disc_grid_8):
    tg = TimeGrid.make(1.0, 1.0, 4)
    u = gf_from(lambda t, pts: 3.0 * t + 0 * r2(pts), disc_grid_8, tg)
    assert time_semiconcavity_estimate(u) == pytest.approx(0.0, abs=1e-12)


def test_semiconcavity_quadratic_signs(disc_grid_8):
    tg = TimeGrid.make(1.0, 1.0, 4)
    t_interior = tg.nodes[1:-1]
    u = gf_from(lambda t, pts: -t * t + 0 * r2(pts), disc_grid_8, tg)
    # second difference is exactly -2; the sup of -2 t_k^2 sits at the
    # smallest interior node
    assert time_semiconcavity_estimate(u) == pytest.approx(
        -2.0 * float(np.min(t_interior)) ** 2, rel=1e-12)
    v = gf_from(lambda t, pts: t * t + 0 * r2(pts), disc_grid_8, tg)
    assert time_semiconcavity_estimate(v) == pytest.approx(
        2.0 * float(np.max(t_interior)) ** 2, rel=1e-12)


def test_semiconcavity_needs_three_nodes(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.5, 1)
    u = GridFunction(np.zeros((2, disc_grid_8.n_nodes)), disc_grid_8, tg)
    with pytest.raises(ValueError):
        time_semiconcavity_estimate(u)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_semiconcavity_of_concave_nonpositive(seed):
    """Second differences of concave-in-t samples are <= 0 for any step
    pattern (min of affine functions oracle)."""
    rng = np.random.default_rng(seed)
    grid = build_grid(BallDomain(1), 0.5)
    steps = rng.uniform(0.05, 0.3, size=6)
    nodes = np.concatenate([[0.0], np.cumsum(steps)])
    tg = TimeGrid(T=float(nodes[-1]) + 0.1, nodes=nodes)
    slopes = rng.normal(size=4)
    offsets = rng.normal(size=4)
    vals = np.min(slopes[None, :] * tg.nodes[:, None] + offsets[None, :], axis=1)
    u = GridFunction(np.tile(vals[:, None], (1, grid.n_nodes)), grid, tg)
    assert time_semiconcavity_estimate(u) <= 1e-12


def test_second_time_differences_exact_on_quadratics():
    nodes = np.array([0.0, 0.1, 0.25, 0.5, 0.6])
    vals = (3.0 * nodes ** 2 - nodes + 2.0)[:, None]
    d2 = second_time_differences(vals, nodes)
    np.testing.assert_allclose(d2, 6.0, rtol=1e-12)


# ---------------------------------------------------------------------------
# submean


def lattice_ball_average(grid, values, z0, r):
    ball = np.sum((grid.nodes - z0) ** 2, axis=1) <= r * r + 1e-12
    return float(np.mean(values[ball]))


def test_submean_quadratic_positive(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.8, 8)
    u = gf_from(lambda t, pts: r2(pts), disc_grid_8, tg)
    z0 = np.zeros(2)
    rep = submean_check(u, 0.4, z0, eps=0.1, r=0.3)
    oracle = lattice_ball_average(disc_grid_8, r2(disc_grid_8.nodes), z0, 0.3)
    assert rep.margin == pytest.approx(oracle - 0.0, abs=1e-12)
    assert rep.margin > 0 and rep.passed


def test_submean_affine_margin_is_kappa_eps(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.8, 8)
    u = gf_from(lambda t, pts: np.atleast_2d(pts)[:, 0] + 2.0 * t, disc_grid_8, tg)
    rep = submean_check(u, 0.4, np.zeros(2), eps=0.1, r=0.3)
    # symmetric averages of affine data equal the center value
    assert rep.margin == pytest.approx(rep.kappa0 * 0.1, abs=1e-10)
    assert rep.kappa0 == pytest.approx(2.0, rel=1e-9)
    assert rep.passed


def test_submean_negative_quadratic_fails(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.8, 8)
    u = gf_from(lambda t, pts: -r2(pts), disc_grid_8, tg)
    rep = submean_check(u, 0.4, np.zeros(2), eps=0.01, r=0.3, tol=1e-6)
    assert rep.margin < 0 and not rep.passed


def test_submean_tube_exits_grid(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.8, 8)
    u = gf_from(lambda t, pts: r2(pts), disc_grid_8, tg)
    with pytest.raises(ValueError):
        submean_check(u, 0.05, np.zeros(2), eps=0.2, r=0.3)
    with pytest.raises(ValueError):
        submean_check(u, 0.4, np.array([0.9, 0.0]), eps=0.1, r=0.3)


# ---------------------------------------------------------------------------
# slice L1 bound


def test_slice_l1_equal_functions(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.9, 9)
    u = gf_from(lambda t, pts: r2(pts) + t, disc_grid_8, tg)
    rep = slice_l1_bound_check(u, u, 0.2, 0.4, 0.8)
    assert rep.lhs == 0.0 and rep.passed


def test_slice_l1_constant_difference(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.9, 18)
    c = 0.37
    u = gf_from(lambda t, pts: r2(pts) + c, disc_grid_8, tg)
    v = gf_from(lambda t, pts: r2(pts), disc_grid_8, tg)
    T0, T1, S = 0.2, 0.7, 0.8
    rep = slice_l1_bound_check(u, v, T0, T1, S)
    vol = disc_grid_8.lattice_volume
    assert rep.lhs == pytest.approx(c * vol, rel=1e-12)
    assert rep.kappa == pytest.approx(0.0, abs=1e-12)
    global_l1 = c * vol * T1
    expected_rhs = 2.0 / (S - T1) * max(math.sqrt(global_l1), global_l1)
    assert rep.rhs == pytest.approx(expected_rhs, rel=1e-12)
    assert rep.passed


def test_slice_l1_linear_in_time(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.8, 16)
    u = gf_from(lambda t, pts: r2(pts) + t, disc_grid_8, tg)
    v = gf_from(lambda t, pts: r2(pts), disc_grid_8, tg)
    T0, T1, S = 0.25, 0.5, 0.75
    rep = slice_l1_bound_check(u, v, T0, T1, S)
    vol = disc_grid_8.lattice_volume
    assert rep.lhs == pytest.approx(0.5 * vol, rel=1e-12)
    assert rep.kappa == pytest.approx(1.0, rel=1e-9)
    big_m = max(math.sqrt(vol), 1.0 / (S - T1))
    global_l1 = 0.5 * T1 ** 2 * vol
    assert rep.rhs == pytest.approx(
        2 * big_m * max(math.sqrt(global_l1), global_l1), rel=1e-9)
    assert rep.passed


def test_slice_l1_interval_out_of_range(disc_grid_8):
    tg = TimeGrid.make(1.0, 0.5, 5)
    u = gf_from(lambda t, pts: r2(pts), disc_grid_8, tg)
    with pytest.raises(ValueError):
        slice_l1_bound_check(u, u, 0.2, 0.6, 0.9)


# ---------------------------------------------------------------------------
# boundary data validation


def test_boundary_data_compatibility_violation(disc_grid_8, dict1):
    tg = TimeGrid.make(1.0, 0.5, 5)
    bd = BoundaryData(lateral=lambda t, pts: np.full(len(np.atleast_2d(pts)), 2.0),
                      initial=lambda pts: r2(pts),  # 1 on the sphere, not 2
                      kappa_h=0.1, C_h=0.1)
    with pytest.raises(ValueError, match="compatibility"):
        bd.validate(disc_grid_8, tg, dict1)


def test_boundary_data_kappa_violation(disc_grid_8, dict1):
    tg = TimeGrid.make(1.0, 0.5, 5)
    bd = BoundaryData(lateral=lambda t, pts: 1.0 + 5.0 * t
                      + 0.0 * np.atleast_2d(pts)[:, 0],
                      initial=lambda pts: r2(pts),
                      kappa_h=0.01, C_h=0.1)
    with pytest.raises(ValueError, match="kappa_h"):
        bd.validate(disc_grid_8, tg, dict1)


def test_boundary_data_psh_violation(disc_grid_8, dict1):
    tg = TimeGrid.make(1.0, 0.5, 5)
    bd = BoundaryData(lateral=lambda t, pts: np.full(len(np.atleast_2d(pts)), -1.0),
                      initial=lambda pts: -r2(pts),
                      kappa_h=0.1, C_h=0.1)
    with pytest.raises(ValueError, match="psh"):
        bd.validate(disc_grid_8, tg, dict1)


def test_boundary_data_valid_case(disc_grid_8, dict1):
    tg = TimeGrid.make(1.0, 0.5, 5)
    bd = BoundaryData(lateral=lambda t, pts: 2.0 + t * math.log(2.0)
                      + 0.0 * np.atleast_2d(pts)[:, 0],
                      initial=lambda pts: 2.0 * r2(pts),
                      kappa_h=math.log(2.0) + 1e-9, C_h=1e-9)
    bd.validate(disc_grid_8, tg, dict1)
