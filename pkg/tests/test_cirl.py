import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfirl.cfmodel import FeatureMap, OracleDynamics
from cfirl.cirl import (
    DegenerateDirection,
    l1_normalize,
    mixing_policy,
    project_simplex,
    projection_loop,
    projection_step,
    run_cirl,
)
from cfirl.errors import CfirlError, InvalidArgument
from cfirl.tdlearn import TDHyper

QUICK = TDHyper(hidden_dim=8, batch_size=64, target_sync=20, iterations=60, eps_decay=1e-3)


def finite_solver(points):
    """Exact inner problem over a fixed set of feature expectations: pick the best point for w."""
    points = np.asarray(points, dtype=np.float64)

    def solve(k, w):
        i = int(np.argmax(points @ w))
        return i, points[i], None

    return solve


def synthetic_instance(seed, d, n_points=12):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n_points, d))
    lam = rng.dirichlet(np.ones(n_points))
    return pts, lam @ pts


# ---------------------------------------------------------------- projection


def test_projection_hand_example():
    bar, t, coef = projection_step([1.0, 1.0], [0.0, 0.0], [2.0, 0.0])
    np.testing.assert_allclose(bar, [1.0, 0.0])
    assert t == pytest.approx(1.0)
    assert coef == pytest.approx(0.5)


def test_projection_onto_expert_itself():
    mu_e = np.array([0.3, -1.2, 4.0])
    bar, t, _ = projection_step(mu_e, [1.0, 1.0, 1.0], mu_e)
    np.testing.assert_allclose(bar, mu_e)
    assert t == pytest.approx(0.0, abs=1e-12)


def test_projection_degenerate_direction():
    with pytest.raises(DegenerateDirection):
        projection_step([1.0, 1.0], [0.5, 0.5], [0.5, 0.5])


def test_projection_clamps_overshoot():
    bar, t, coef = projection_step([5.0, 0.0], [0.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(bar, [1.0, 0.0])
    assert coef == 1.0
    bar, _, coef = projection_step([-5.0, 1.0], [0.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(bar, [0.0, 0.0])
    assert coef == 0.0


@given(st.lists(st.floats(-10, 10), min_size=9, max_size=9))
def test_projection_stays_on_segment_and_never_moves_away(vals):
    mu_e, prev, new = np.array(vals).reshape(3, 3)
    if np.linalg.norm(new - prev) < 1e-6:
        return
    bar, t, coef = projection_step(mu_e, prev, new)
    assert 0.0 <= coef <= 1.0
    np.testing.assert_allclose(bar, prev + coef * (new - prev), atol=1e-9)
    assert t <= np.linalg.norm(mu_e - prev) + 1e-9


# ---------------------------------------------------------------- mixing


def test_mixing_single_point():
    m = mixing_policy([0.2, 0.4], [[0.2, 0.4]])
    np.testing.assert_allclose(m.lambdas, [1.0])
    assert m.distance == pytest.approx(0.0, abs=1e-12)


def test_mixing_midpoint():
    m = mixing_policy([1.0, 0.0], [[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_allclose(m.lambdas, [0.5, 0.5], atol=1e-7)
    assert m.distance == pytest.approx(0.0, abs=1e-7)


def test_mixing_matches_grid_search():
    mus = np.array([[0.0, 0.0], [0.0, 2.0]])
    mu_e = np.array([1.0, 1.0])
    m = mixing_policy(mu_e, mus)
    grid = np.linspace(0.0, 1.0, 100001)
    pts = (1 - grid)[:, None] * mus[0] + grid[:, None] * mus[1]
    dist = np.linalg.norm(pts - mu_e, axis=1)
    best = grid[np.argmin(dist)]
    np.testing.assert_allclose(m.achieved_mu, [0.0, 1.0], atol=1e-7)
    assert m.lambdas[1] == pytest.approx(best, abs=1e-5)
    assert m.distance == pytest.approx(dist.min(), abs=1e-8)


def test_mixing_rejects_empty():
    with pytest.raises(InvalidArgument):
        mixing_policy([0.0, 0.0], [])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8), st.integers(2, 5))
def test_mixing_lambdas_on_simplex_and_stationary(seed, n, d):
    rng = np.random.default_rng(seed)
    mus = rng.normal(size=(n, d))
    mu_e = rng.normal(size=d) * 2
    m = mixing_policy(mu_e, mus)
    assert abs(m.lambdas.sum() - 1.0) < 1e-9
    assert (m.lambdas >= 0).all()
    # no single vertex is closer than the mixture
    assert m.distance <= np.linalg.norm(mus - mu_e, axis=1).min() + 1e-7
    # first-order optimality: no vertex direction decreases the objective
    grad = 2 * mus @ (m.achieved_mu - mu_e)
    assert grad.min() >= grad @ m.lambdas - 1e-5


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10))
def test_simplex_projection_is_a_distribution(v):
    p = project_simplex(v)
    assert abs(p.sum() - 1.0) < 1e-9
    assert (p >= 0).all()


def test_l1_normalize():
    np.testing.assert_allclose(l1_normalize([-3.0, -7.0]), [-0.3, -0.7])
    np.testing.assert_allclose(l1_normalize([0.0, 0.0]), [0.0, 0.0])


# ---------------------------------------------------------------- synthetic loop


@pytest.mark.parametrize("d", [2, 5])
@pytest.mark.parametrize("seed", range(5))
def test_synthetic_margins_nonincreasing_and_mixture_within_epsilon(d, seed):
    pts, mu_e = synthetic_instance(seed, d)
    eps = 1e-3
    its, chosen, _, status = projection_loop(mu_e, finite_solver(pts), np.ones(d) / np.sqrt(d), eps, 2000)
    margins = [it.margin for it in its[1:]]
    assert all(b <= a + 1e-12 for a, b in zip(margins, margins[1:]))
    assert status == "converged"
    mix = mixing_policy(mu_e, [it.mu for it in its])
    assert mix.distance <= eps


def test_weight_update_identity():
    pts, mu_e = synthetic_instance(11, 3)
    its, _, _, _ = projection_loop(mu_e, finite_solver(pts), np.array([1.0, 0.0, 0.0]), 1e-6, 30)
    for prev, cur in zip(its, its[1:]):
        np.testing.assert_array_equal(cur.weights, mu_e - prev.mu_bar)


def test_infinite_epsilon_stops_after_first_update():
    pts, mu_e = synthetic_instance(2, 2)
    its, _, _, status = projection_loop(mu_e, finite_solver(pts), np.array([0.0, 1.0]), np.inf, 50)
    assert status == "converged"
    assert [it.k for it in its] == [0, 1]
    np.testing.assert_array_equal(its[1].weights, mu_e - its[0].mu)


def test_zero_iterations_returns_initial_artifacts():
    pts, mu_e = synthetic_instance(3, 2)
    its, chosen, _, status = projection_loop(mu_e, finite_solver(pts), np.array([1.0, 0.0]), 1e-3, 0)
    assert len(its) == 1 and len(chosen) == 1
    assert status == "max_iters"


def test_repeated_degenerate_steps_stall():
    same = np.array([1.0, 0.0])

    def solve(k, w):
        return k, same, None

    its, _, _, status = projection_loop([0.0, 1.0], solve, np.array([1.0, 0.0]), 1e-3, 10)
    assert status == "stalled"
    assert len(its) == 3


def test_loop_rejects_bad_arguments():
    solve = finite_solver([[0.0, 0.0]])
    with pytest.raises(InvalidArgument):
        projection_loop([0.0, 0.0], solve, np.ones(2), 0.0, 5)
    with pytest.raises(InvalidArgument):
        projection_loop([0.0, 0.0], solve, np.ones(2), 1e-3, -1)


# ---------------------------------------------------------------- learned loop


@pytest.fixture(scope="module")
def small(tiny_config, tiny_dataset):
    fmap = FeatureMap(OracleDynamics(tiny_config))
    return tiny_dataset, fmap, fmap.table(tiny_dataset)


def test_run_cirl_infinite_epsilon(small):
    ds, fmap, cf = small
    res = run_cirl(ds, fmap, 0.9, epsilon=np.inf, max_iters=5, q_hyper=QUICK, mu_hyper=QUICK, seed=4, table=cf)
    assert res.status == "converged"
    assert len(res.iterations) == len(res.policies) == 2
    np.testing.assert_array_equal(res.iterations[1].weights, res.mu_expert - res.iterations[0].mu)
    assert np.linalg.norm(res.iterations[0].weights) == pytest.approx(1.0)
    assert abs(res.mixing.lambdas.sum() - 1) < 1e-9


def test_run_cirl_zero_iterations(small):
    ds, fmap, cf = small
    res = run_cirl(ds, fmap, 0.9, max_iters=0, q_hyper=QUICK, mu_hyper=QUICK, seed=4, table=cf)
    assert len(res.iterations) == 1
    assert res.selected == 0
    assert np.abs(res.selected_weights).sum() == pytest.approx(1.0)


def test_run_cirl_errors_name_the_iteration(small):
    ds, fmap, cf = small
    with pytest.raises(CfirlError) as info:
        run_cirl(ds, fmap, 0.9, max_iters=2, q_hyper=QUICK, mu_hyper=QUICK, seed=4, table=cf, mu_loss="huber")
    assert "iteration 0" in str(info.value)
    assert info.value.cirl_iteration == 0


def test_run_cirl_is_deterministic(small):
    ds, fmap, cf = small
    a = run_cirl(ds, fmap, 0.9, max_iters=2, q_hyper=QUICK, mu_hyper=QUICK, seed=9, table=cf)
    b = run_cirl(ds, fmap, 0.9, max_iters=2, q_hyper=QUICK, mu_hyper=QUICK, seed=9, table=cf)
    for x, y in zip(a.iterations, b.iterations):
        np.testing.assert_array_equal(x.mu, y.mu)
        np.testing.assert_array_equal(x.weights, y.weights)


def test_mixing_with_repeated_points():
    m = mixing_policy([1.0, 0.0], [[0.0, 0.0], [2.0, 0.0], [0.0, 0.0], [2.0, 0.0]])
    assert len(m.lambdas) == 4
    assert abs(m.lambdas.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(m.achieved_mu, [1.0, 0.0], atol=1e-7)
