import math

import numpy as np
import pytest
from conftest import box1, make_scenario, regression_setup, tree_clamped_y0, tree_setup
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsde.exceptions import PointOutsideError
from rbsde.geometry import Box
from rbsde.region import discretize
from rbsde.solvers import (
    convergence_sweep,
    solve_fixed_domain,
    solve_local,
    solve_penalized,
    solve_piecewise,
    sweep_decreasing,
)
from rbsde.verification import check_containment, solution_distance

CLAMP = {"family": "clamp", "lower": -0.3, "upper": 0.3}
BIG_BALL = {"type": "ball", "center": [0.0], "radius": 100.0}


def clamp_scenario(**kw):
    return make_scenario(region={"family": "constant", "set": box1(-0.3, 0.3)}, terminal=CLAMP,
                         schemes={"penalized": [256]}, **kw)


def expanding_scenario(**kw):
    region = {"family": "piecewise", "witness": [1.0], "margin": 1.0,
              "pieces": [{"start": 0.0, "set": box1(0, 2)}, {"start": 0.5, "set": box1(-2, 2)}]}
    return make_scenario(region=region, terminal={"family": "clamp", "lower": -2, "upper": 2},
                         schemes={"piecewise": [4], "penalized": [64]}, **kw)


def moving_box_scenario(**kw):
    return make_scenario(region={"family": "moving_box"}, terminal={"family": "projected"}, **kw)


# -- fixed domain --------------------------------------------------------------

def test_unconstrained_tanh_has_no_reflection():
    sc = make_scenario(region={"family": "constant", "set": BIG_BALL}, terminal={"family": "tanh"})
    grid, be = regression_setup(sc, steps=50, paths=20_000)
    sol = solve_fixed_domain(sc, grid, be)
    assert np.all(sol.K == 0.0)
    assert abs(float(sol.Y0[0])) <= 3 * sol.y0_se


def test_linear_driver_gives_exponential_decay():
    sc = make_scenario(region={"family": "constant", "set": BIG_BALL},
                       terminal={"family": "constant", "value": 1.0},
                       driver={"family": "linear", "a": -1.0})
    grid, be = regression_setup(sc, steps=100, paths=2000)
    sol = solve_fixed_domain(sc, grid, be)
    assert float(sol.Y0[0]) == pytest.approx(math.exp(-1.0), abs=2e-2)


def test_tree_fixed_domain_equals_independent_oracle():
    sc = clamp_scenario()
    grid, tree = tree_setup(sc, 20)
    sol = solve_fixed_domain(sc, grid, tree)
    assert float(sol.Y[0, 0, 0]) == pytest.approx(tree_clamped_y0(-0.3, 0.3, 20), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(-1.5, -0.05), st.floats(0.05, 1.5), st.integers(2, 16))
def test_tree_fixed_domain_matches_oracle_for_any_interval(lo, hi, steps):
    sc = make_scenario(region={"family": "constant", "set": box1(lo, hi)},
                       terminal={"family": "clamp", "lower": lo, "upper": hi}, schemes={"penalized": [8]})
    grid, tree = tree_setup(sc, steps, paths=20)
    sol = solve_fixed_domain(sc, grid, tree)
    assert float(sol.Y[0, 0, 0]) == pytest.approx(tree_clamped_y0(lo, hi, steps), abs=1e-12)
    assert np.all(sol.Y >= lo - 1e-15) and np.all(sol.Y <= hi + 1e-15)


def test_regression_clamp_matches_tree_oracle():
    sc = clamp_scenario()
    grid, be = regression_setup(sc, steps=50, paths=10_000)
    sol = solve_fixed_domain(sc, grid, be)
    assert float(sol.Y0[0]) == pytest.approx(tree_clamped_y0(-0.3, 0.3, 20), abs=5e-2)


def test_terminal_outside_region_names_h1():
    sc = make_scenario(region={"family": "constant", "set": box1(-0.3, 0.3)}, terminal={"family": "linear"})
    grid, be = regression_setup(sc, steps=10, paths=500)
    with pytest.raises(PointOutsideError, match=r"\(H1\)"):
        solve_fixed_domain(sc, grid, be)


# -- local solutions -----------------------------------------------------------

def test_local_on_whole_horizon_equals_fixed_domain():
    sc = clamp_scenario()
    grid, be = regression_setup(sc, steps=40, paths=3000)
    fixed = solve_fixed_domain(sc, grid, be)
    xi = fixed.xi
    local = solve_local(Box([-0.3], [0.3]), 0, grid.N, xi, sc, grid, be)
    np.testing.assert_array_equal(local.Y, fixed.Y)
    np.testing.assert_array_equal(local.Z, fixed.Z)


def test_local_single_node_is_trivial():
    sc = clamp_scenario()
    grid, be = regression_setup(sc, steps=10, paths=500)
    zeta = np.clip(be.ensemble.W[:, 5], -0.3, 0.3)
    sol = solve_local(Box([-0.3], [0.3]), 5, 5, zeta, sc, grid, be)
    np.testing.assert_array_equal(sol.Y[:, 0], zeta)
    assert sol.Z.shape[1] == 0
    assert np.all(sol.K == 0)


def _oracle_local_mean(k0, k1, lo, hi, h):
    # binomial states at level k1, clamp, backward to k0, then average over W_{t_k0}
    x = h * (2 * np.arange(k1 + 1) - k1)
    y = np.clip(x, lo, hi)
    for k in range(k1 - 1, k0 - 1, -1):
        y = np.clip(0.5 * (y[:-1] + y[1:]), lo, hi)
    w = np.array([math.comb(k0, i) for i in range(k0 + 1)]) / 2**k0
    return float(np.sum(w * y))


def test_local_solution_on_frozen_interval_matches_tree_oracle():
    sc = make_scenario(region={"family": "constant", "set": box1(0, 2)},
                       terminal={"family": "clamp", "lower": 0, "upper": 2}, schemes={"penalized": [8]})
    k0, k1 = 8, 20
    oracle = _oracle_local_mean(k0, k1, 0.0, 2.0, math.sqrt(1 / 20))
    grid, tree = tree_setup(sc, 20, paths=20_000)
    zeta = np.clip(tree.states(k1), 0, 2)
    exact = solve_local(Box([0.0], [2.0]), k0, k1, zeta, sc, grid, tree)
    # lifted values average the tree level with the sign-walk frequencies
    assert float(exact.Y[:, 0, 0].mean()) == pytest.approx(oracle, abs=2e-2)
    grid, be = regression_setup(sc, steps=20, paths=20_000)
    zeta = np.clip(be.ensemble.W[:, k1], 0, 2)
    mc = solve_local(Box([0.0], [2.0]), k0, k1, zeta, sc, grid, be)
    assert float(mc.Y[:, 0, 0].mean()) == pytest.approx(oracle, abs=5e-2)


# -- piecewise -----------------------------------------------------------------

def test_piecewise_on_constant_region_equals_fixed_domain():
    sc = clamp_scenario()
    grid, be = regression_setup(sc, steps=64, paths=3000)
    fixed = solve_fixed_domain(sc, grid, be)
    for j in (2, 8):
        pw = solve_piecewise(sc, discretize(sc.region, j), grid, be)
        np.testing.assert_array_equal(pw.Y, fixed.Y)
        assert np.all(pw.Kd_jump == 0)


def test_piecewise_expanding_jump_is_projection():
    sc = expanding_scenario()
    grid, be = regression_setup(sc, steps=64, paths=3000)
    sol = solve_piecewise(sc, discretize(sc.region, 4), grid, be)
    k = grid.index_of(0.5)
    np.testing.assert_array_equal(sol.Y_left[:, k, 0], np.maximum(sol.Y[:, k, 0], 0.0))
    np.testing.assert_allclose(sol.Kd_jump[:, k], sol.Y_left[:, k] - sol.Y[:, k], atol=1e-15)
    assert check_containment(sol).passed


def test_piecewise_sweep_is_cauchy_on_moving_box():
    sc = moving_box_scenario(schemes={"piecewise": [8, 16, 32]})
    grid, be = regression_setup(sc, steps=128, paths=4000)
    entries = convergence_sweep(sc, "piecewise", [8, 16, 32], grid, be)
    assert sweep_decreasing(entries)


def test_tree_backend_refuses_frozen_adapted_sets():
    sc = make_scenario(m=2, d=2, region={"family": "witness_translated"}, terminal={"family": "projected"},
                       schemes={"piecewise": [4]})
    grid, tree = tree_setup(sc, 8, paths=20)
    with pytest.raises(ValueError, match="tree backend"):
        solve_piecewise(sc, discretize(sc.region, 4, state=tree.path_ensemble), grid, tree)


# -- penalized -----------------------------------------------------------------

def test_penalized_in_large_region_is_unconstrained():
    sc = make_scenario(region={"family": "constant", "set": BIG_BALL}, terminal={"family": "tanh"})
    grid, be = regression_setup(sc, steps=40, paths=3000)
    pen = solve_penalized(sc, 64, grid, be)
    fixed = solve_fixed_domain(sc, grid, be)
    assert np.all(pen.Kc_inc == 0) and np.all(pen.Kd_jump == 0)
    np.testing.assert_array_equal(pen.Y, fixed.Y)


def test_penalized_continuous_region_has_no_jump_part():
    sc = moving_box_scenario(schemes={"penalized": [32]})
    grid, be = regression_setup(sc, steps=64, paths=2000)
    sol = solve_penalized(sc, 32, grid, be)
    assert np.all(sol.Kd_jump == 0)
    assert np.any(sol.Kc_inc != 0)


def test_penalized_constant_convex_region_never_leaves():
    # with f = 0, conditional means of points of a fixed convex set stay in it,
    # so the penalty never acts and containment holds for every n
    sc = clamp_scenario()
    grid, be = regression_setup(sc, steps=64, paths=4000)
    for n in (32, 256):
        sol = solve_penalized(sc, n, grid, be)
        assert check_containment(sol, threshold=1e-12).passed
        assert np.all(sol.K == 0)


def test_resolvent_and_iteration_agree():
    sc = moving_box_scenario()
    grid, be = regression_setup(sc, steps=64, paths=2000)
    a = solve_penalized(sc, 128, grid, be, method="resolvent")
    b = solve_penalized(sc, 128, grid, be, method="iteration")
    np.testing.assert_allclose(a.Y, b.Y, atol=1e-9)
    np.testing.assert_allclose(a.K, b.K, atol=1e-9)


def test_penalized_jump_follows_projection_formula():
    sc = expanding_scenario()
    grid, be = regression_setup(sc, steps=64, paths=3000)
    sol = solve_penalized(sc, 64, grid, be)
    k = grid.index_of(0.5)
    assert k in sol.jump_nodes
    expected = np.maximum(sol.Y[:, k], 0.0) - sol.Y[:, k]
    np.testing.assert_allclose(sol.Kd_jump[:, k], expected, atol=1e-10)
    np.testing.assert_allclose(sol.Y_left[:, k] - sol.Y[:, k], expected, atol=1e-10)


def test_penalized_rejects_bad_n():
    sc = clamp_scenario()
    grid, be = regression_setup(sc, steps=8, paths=500)
    with pytest.raises(ValueError):
        solve_penalized(sc, 0, grid, be)


def test_penalized_containment_shrinks_with_n():
    sc = moving_box_scenario()
    grid, be = regression_setup(sc, steps=128, paths=4000)
    stats = [check_containment(solve_penalized(sc, n, grid, be)).checks[0].statistic for n in (32, 64, 128)]
    ratios = [b / a for a, b in zip(stats, stats[1:])]
    assert all(0.3 <= r <= 0.8 for r in ratios)


def test_schemes_agree_on_constant_region():
    sc = clamp_scenario()
    grid, be = regression_setup(sc, steps=64, paths=3000)
    sols = [solve_fixed_domain(sc, grid, be), solve_penalized(sc, 64, grid, be),
            solve_piecewise(sc, discretize(sc.region, 8), grid, be)]
    for a in sols:
        for b in sols:
            assert solution_distance(a, b)[0] <= 1e-3


def test_solution_invariants():
    sc = expanding_scenario()
    grid, be = regression_setup(sc, steps=64, paths=2000)
    for sol in (solve_piecewise(sc, discretize(sc.region, 4), grid, be), solve_penalized(sc, 64, grid, be)):
        assert np.all(sol.K[:, 0] == 0)
        np.testing.assert_array_equal(sol.Y[:, -1], np.clip(be.ensemble.W[:, -1], -2, 2))
        assert sol.Z.shape == (sol.P, sol.N, 1, 1)
