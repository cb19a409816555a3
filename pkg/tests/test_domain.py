import itertools
import json
import math

import numpy as np
import pytest

from cmaflow.domain import (
    INTERIOR,
    NEAR_BOUNDARY,
    BallDomain,
    GridError,
    TimeGrid,
    build_grid,
    lateral_trace_points,
    stencil_directions,
)


def brute_force_interior(n, h):
    """Enumeration oracle: lattice points with |z| < 1 whose axis neighbors
    all lie in the closed ball."""
    dim = 2 * n
    m = int(math.floor(1.0 / h)) + 1
    nodes = []
    for k in itertools.product(range(-m, m + 1), repeat=dim):
        p = np.array(k, dtype=float) * h
        if p @ p >= 1.0 - 1e-12:
            continue
        ok = True
        for a in range(dim):
            for s in (+1, -1):
                q = p.copy()
                q[a] += s * h
                if q @ q > 1.0 + 1e-12:
                    ok = False
        nodes.append((tuple(np.round(p, 12)), ok))
    return nodes


def test_interior_nodes_h_half():
    grid = build_grid(BallDomain(1), 0.5)
    interior = sorted(map(tuple, np.round(grid.nodes[grid.interior_ids], 12)))
    assert interior == [(-0.5, 0.0), (0.0, -0.5), (0.0, 0.0), (0.0, 0.5), (0.5, 0.0)]
    assert grid.n_nodes == 9


@pytest.mark.parametrize("n,h", [(1, 0.5), (1, 0.25), (1, 1 / 8), (2, 0.5), (2, 0.25)])
def test_interior_matches_enumeration_oracle(n, h):
    grid = build_grid(BallDomain(n), h)
    oracle = brute_force_interior(n, h)
    expected_inside = {p for p, _ in oracle}
    expected_interior = {p for p, ok in oracle if ok}
    got_inside = set(map(tuple, np.round(grid.nodes, 12)))
    got_interior = set(map(tuple, np.round(grid.nodes[grid.interior_ids], 12)))
    assert got_inside == expected_inside
    assert got_interior == expected_interior


def test_too_coarse_raises():
    with pytest.raises(GridError):
        build_grid(BallDomain(1), 2.0)


def test_full_step_boundary_hit():
    grid = build_grid(BallDomain(1), 0.5)
    i = grid.node_id((1, 0))
    assert grid.neighbor[(0, +1)][i] == -1
    assert grid.theta[(0, +1)][i] == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(grid.sphere_point[(0, +1)][i], [1.0, 0.0], atol=1e-14)


def test_diagonal_node_hit_point():
    # +y arm from (1/2, 1/2) meets the circle at (1/2, sqrt(3)/2)
    grid = build_grid(BallDomain(1), 0.5)
    j = grid.node_id((1, 1))
    assert grid.mask[j] == NEAR_BOUNDARY
    assert grid.theta[(1, +1)][j] == pytest.approx(math.sqrt(3) - 1, abs=1e-12)
    np.testing.assert_allclose(grid.sphere_point[(1, +1)][j],
                               [0.5, math.sqrt(3) / 2], atol=1e-12)


def test_near_boundary_axis_hit_count():
    # four near-boundary nodes, two outward axis directions each
    grid = build_grid(BallDomain(1), 0.5)
    nb = np.nonzero(grid.mask == NEAR_BOUNDARY)[0]
    assert len(nb) == 4
    count = sum(int(np.sum(grid.neighbor[(d, s)][nb] < 0))
                for d in range(2) for s in (+1, -1))
    assert count == 8


def test_lateral_trace_points_contains_expected():
    grid = build_grid(BallDomain(1), 0.5)
    pts = np.round(lateral_trace_points(grid), 10)
    pts_set = set(map(tuple, pts))
    assert (1.0, 0.0) in pts_set
    assert (0.5, round(math.sqrt(3) / 2, 10)) in pts_set
    norms = np.linalg.norm(pts, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-10)


def test_every_near_boundary_node_has_a_hit():
    for n, h in [(1, 1 / 8), (2, 1 / 4)]:
        grid = build_grid(BallDomain(n), h)
        nb = np.nonzero(grid.mask == NEAR_BOUNDARY)[0]
        has_hit = np.zeros(grid.n_nodes, dtype=bool)
        for d in range(grid.n_dirs):
            for s in (+1, -1):
                has_hit |= grid.neighbor[(d, s)] < 0
        assert np.all(has_hit[nb])


def test_theta_range_and_sphere_residual():
    grid = build_grid(BallDomain(2), 1 / 4)
    for d in range(grid.n_dirs):
        for s in (+1, -1):
            miss = grid.neighbor[(d, s)] < 0
            th = grid.theta[(d, s)][miss]
            assert np.all(th > 0) and np.all(th <= 1 + 1e-12)
            pts = grid.sphere_point[(d, s)][miss]
            np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2])
def test_mask_symmetry(n):
    grid = build_grid(BallDomain(n), 1 / 4)
    lookup = {tuple(k): grid.mask[i] for i, k in enumerate(grid.lattice.tolist())}
    dim = 2 * n
    for k, mask in lookup.items():
        for a in range(dim):
            flipped = list(k)
            flipped[a] = -flipped[a]
            assert lookup[tuple(flipped)] == mask
        assert lookup[tuple(reversed(k))] == mask


def test_refinement_monotonicity():
    coarse = build_grid(BallDomain(1), 1 / 4)
    fine = build_grid(BallDomain(1), 1 / 8)
    for i in coarse.interior_ids:
        j = fine.node_id(2 * coarse.lattice[i])
        assert j >= 0  # still a stored (non-exterior) node
        assert fine.mask[j] in (INTERIOR, NEAR_BOUNDARY)


def test_stencil_directions_shape():
    d1 = stencil_directions(2)
    assert d1.shape == (4, 2)
    d2 = stencil_directions(4)
    assert d2.shape == (16, 4)
    # axes first
    np.testing.assert_array_equal(d2[:4], np.eye(4, dtype=int))


def test_grid_json_dump():
    grid = build_grid(BallDomain(1), 0.5)
    data = json.loads(grid.to_json())
    assert data["n"] == 1 and data["h_x"] == 0.5
    assert len(data["nodes"]) == grid.n_nodes
    assert set(data["mask"]) == {"interior", "near-boundary"}
    assert all(0 < hit["theta"] <= 1 for hit in data["boundary_hits"])


def test_time_grid_uniform_and_geometric():
    tg = TimeGrid.make(1.0, 0.75, 3)
    np.testing.assert_allclose(tg.nodes, [0.0, 0.25, 0.5, 0.75])
    tg2 = TimeGrid.make(1.0, 0.75, 10, grading="geometric", ratio=1.2)
    steps = tg2.steps
    ratios = steps[1:] / steps[:-1]
    assert np.all(ratios >= 1.0 - 1e-12) and np.all(ratios <= 2.0 + 1e-12)
    assert tg2.nodes[0] == 0.0 and tg2.nodes[-1] == pytest.approx(0.75)
    with pytest.raises(ValueError):
        TimeGrid.make(1.0, 0.75, 10, grading="geometric", ratio=3.0)


def test_time_grid_truncate():
    tg = TimeGrid.make(1.0, 0.8, 8)
    sub = tg.truncate(5)
    assert sub.K == 5
    np.testing.assert_allclose(sub.nodes, tg.nodes[:6])
