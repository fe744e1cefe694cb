import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfirl import cohort
from cfirl.cfmodel import FeatureMap, OracleDynamics
from cfirl.errors import InvalidArgument
from cfirl.policies import greedy_probs, uniform_random
from cfirl.policyopt import action_frequency, optimize_policy
from cfirl.tdlearn import TDHyper

HYPER = TDHyper(hidden_dim=16, batch_size=128, target_sync=50, iterations=2000, eps_decay=1e-4)


@pytest.fixture(scope="module")
def setup(tiny_config, tiny_dataset):
    fmap = FeatureMap(OracleDynamics(tiny_config))
    train, held = tiny_dataset.split()
    return fmap, train, held, fmap.table(train), fmap.table(held)


def test_zero_reward_gives_zero_q(setup):
    fmap, train, held, cf, cf_held = setup
    pol = optimize_policy(np.zeros(2), train, fmap, 0.9, HYPER, seed=1, table=cf)
    q, _ = pol.q_values(cf_held)
    assert np.abs(q).max() < 0.05


def test_tumour_focus_treats_more_than_side_effect_focus(setup):
    fmap, train, _, cf, _ = setup
    tumour = optimize_policy(np.array([-1.0, 0.0]) / np.sqrt(2), train, fmap, 0.9, HYPER, seed=2, table=cf)
    side = optimize_policy(np.array([0.0, -1.0]) / np.sqrt(2), train, fmap, 0.9, HYPER, seed=2, table=cf)
    assert action_frequency(tumour, cf) > action_frequency(side, cf)


def test_myopic_policy_maximizes_immediate_reward(setup):
    fmap, train, held, cf, cf_held = setup
    w = np.array([-0.6, -0.4])
    pol = optimize_policy(w, train, fmap, 0.0, HYPER, seed=3, table=cf)
    r = cf_held.phi @ w
    clear = np.abs(r[:, 1] - r[:, 0]) > 1e-3
    got = pol.table_probs(cf_held)[0][:, 1]
    assert np.array_equal(got[clear], (r[clear, 1] > r[clear, 0]).astype(float))


@settings(max_examples=100, deadline=None)
@given(
    phi=st.lists(st.floats(0.0, 0.7), min_size=4, max_size=4),
    w=st.lists(st.floats(-1.0, 1.0), min_size=2, max_size=2),
    c=st.floats(1e-3, 1e3),
)
def test_myopic_argmax_is_scale_invariant(phi, w, c):
    phi = np.array(phi).reshape(1, 2, 2)
    w = np.array(w)
    assert np.array_equal(greedy_probs(phi @ w), greedy_probs(phi @ (c * w)))


def test_candidate_is_deterministic_greedy(setup):
    fmap, train, _, cf, _ = setup
    pol = optimize_policy(np.array([-0.5, 0.5]), train, fmap, 0.5, TDHyper(hidden_dim=8, iterations=50), table=cf)
    pre, ext = pol.table_probs(cf)
    assert set(np.unique(pre)) <= {0.0, 1.0} and set(np.unique(ext)) <= {0.0, 1.0}
    assert pol.kind == "greedy"
    assert np.array_equal(pol.reward_weights_used, [-0.5, 0.5])


def test_bad_weights_rejected(setup):
    fmap, train, _, cf, _ = setup
    with pytest.raises(InvalidArgument):
        optimize_policy(np.array([np.nan, 0.0]), train, fmap, 0.9, HYPER, table=cf)
    with pytest.raises(InvalidArgument):
        optimize_policy(np.ones(3), train, fmap, 0.9, HYPER, table=cf)


def test_memoryless_feature_map_gives_memoryless_policy():
    from cfirl.cfmodel import DynamicsModel
    from cfirl import seqnet
    from cfirl.oncosim import SimConfig

    cfg = SimConfig(p=1, noise_std=0.0, max_horizon=4)
    ds = cohort.generate(uniform_random(), cfg, 50, 1)
    fmap = FeatureMap(DynamicsModel(seqnet.init_network(0, 3, 4, 2), "plain_memoryless", cfg))
    pol = optimize_policy(np.array([-1.0, 0.0]), ds, fmap, 0.9, TDHyper(hidden_dim=8, iterations=20))
    assert pol.memoryless and pol.net.input_dim == 2
