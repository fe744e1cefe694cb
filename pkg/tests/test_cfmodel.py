import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfirl import cfmodel, cohort, seqnet
from cfirl.cfmodel import DynamicsModel, FeatureMap, OracleDynamics, PropensityModel
from cfirl.cohort import BatchDataset, Trajectory
from cfirl.errors import InvalidArgument, InvalidState, NumericFailure, OverlapViolation
from cfirl.histories import History, PrefixTable
from cfirl.oncosim import SimConfig, Termination
from cfirl.policies import always_treat, uniform_random

QUIET = SimConfig(noise_std=0.0)


class FixedDynamics:
    """Always predicts the same next covariates."""

    memoryless = False

    def __init__(self, config, x, z):
        self.config = config
        self.value = np.array([x, z])

    def predict(self, history, action):
        return self.value.copy()

    def predict_table(self, prefix):
        return np.broadcast_to(self.value, (prefix.size, 2, 2)).copy()


def constant_propensity(config, logit):
    net = seqnet.init_network(0, 4, 4, 1)
    for k in net.arrays:
        net.arrays[k][:] = 0.0
    net.arrays["b_out"][:] = logit
    return PropensityModel(net, config)


def random_dynamics(seed, mode="plain_history", config=QUIET):
    dim = 3 if mode == "plain_memoryless" else 4
    net = seqnet.init_network(seed, dim, 6, 2)
    rng = np.random.default_rng(seed)
    for k in net.arrays:
        net.arrays[k] = rng.normal(0.0, 2.0, net.arrays[k].shape)
    return DynamicsModel(net, mode, config)


@pytest.fixture(scope="module")
def quiet_data():
    return cohort.generate(uniform_random(), QUIET, 60, 2)


def test_phi_example():
    fmap = FeatureMap(FixedDynamics(QUIET, 32.5, 0.0))
    h = History([[30.0, 2.0]], [])
    np.testing.assert_allclose(cfmodel.phi(fmap, h, 0), [0.65 / np.sqrt(2), 0.0])
    assert cfmodel.phi(fmap, h, 0)[0] == pytest.approx(0.4596, abs=1e-4)


def test_oracle_reproduces_noise_free_data(quiet_data):
    prefix = PrefixTable.from_dataset(quiet_data)
    pred = OracleDynamics(QUIET).predict_table(prefix)[np.arange(prefix.size), prefix.logged_actions]
    np.testing.assert_allclose(pred, prefix.covariates[prefix.traj, prefix.t + 1], atol=1e-12)
    fmap = FeatureMap(OracleDynamics(QUIET))
    tr = quiet_data.trajectories[0]
    h = History(tr.covariates[:2], tr.actions[:1])
    back = fmap.phi(h, tr.actions[1]) * np.array([QUIET.x_max, QUIET.z_max]) * np.sqrt(2)
    np.testing.assert_allclose(back, tr.covariates[2], atol=1e-12)


def test_oracle_single_query_matches_table(quiet_data):
    oracle = OracleDynamics(QUIET)
    prefix = PrefixTable.from_dataset(quiet_data)
    table = oracle.predict_table(prefix)
    for r in range(0, prefix.size, 37):
        i, t = prefix.traj[r], prefix.t[r]
        tr = quiet_data.trajectories[i]
        h = History(tr.covariates[: t + 1], tr.actions[:t])
        for a in (0, 1):
            np.testing.assert_allclose(oracle.predict(h, a), table[r, a], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), mode=st.sampled_from(["plain_history", "plain_memoryless"]))
def test_phi_norm_bound(seed, mode):
    ds = cohort.generate(uniform_random(), QUIET, 20, seed)
    fmap = FeatureMap(random_dynamics(seed, mode))
    cf = fmap.table(ds)
    assert np.linalg.norm(cf.phi, axis=-1).max() <= 1.0 + 1e-12


def test_model_table_agrees_with_single_queries(quiet_data):
    for mode in ("plain_history", "plain_memoryless"):
        dyn = random_dynamics(5, mode)
        prefix = PrefixTable.from_dataset(quiet_data)
        table = dyn.predict_table(prefix)
        for r in range(0, prefix.size, 41):
            i, t = prefix.traj[r], prefix.t[r]
            tr = quiet_data.trajectories[i]
            h = History(tr.covariates[: t + 1], tr.actions[:t])
            for a in (0, 1):
                np.testing.assert_allclose(dyn.predict(h, a), table[r, a], atol=1e-10)


def test_predictions_are_clamped():
    dyn = random_dynamics(9)
    dyn.net.arrays["b_out"][:] = [50.0, -50.0]
    out = dyn.predict(History([[30.0, 2.0]], []), 1)
    assert out.tolist() == [QUIET.x_max, 0.0]


def test_next_history():
    fmap = FeatureMap(OracleDynamics(QUIET))
    h = History([[30.0, 2.0], [32.5, 0.0]], [0])
    h0, h1 = fmap.next_history(h, 0), cfmodel.next_history(fmap, h, 1)
    assert h0.t == h.t + 1
    np.testing.assert_array_equal(h0.covariates[-1], fmap.covariates(fmap.phi(h, 0)))
    np.testing.assert_array_equal(h0.covariates[:-1], h1.covariates[:-1])
    assert h0.actions[-1] == 0 and h1.actions[-1] == 1
    assert not np.array_equal(h0.covariates[-1], h1.covariates[-1])


def test_next_history_refuses_terminal():
    fmap = FeatureMap(OracleDynamics(QUIET))
    with pytest.raises(InvalidState):
        fmap.next_history(History([[30.0, 2.0], [0.0, 0.0]], [1]), 0)
    long = History(np.full((21, 2), 20.0), np.zeros(20))
    with pytest.raises(InvalidState):
        fmap.next_history(long, 0)


def test_counterfactual_table_terminal_flags(quiet_data):
    cf = FeatureMap(OracleDynamics(QUIET)).table(quiet_data)
    last = cf.prefix.t == QUIET.max_horizon - 1
    assert cf.next_terminal[last].all()
    x = cf.next_covariates[..., 0]
    assert cf.next_terminal[(x <= 0) | (x >= QUIET.x_max)].all()


def test_plain_weights_are_all_one(quiet_data):
    w = cfmodel.training_weights(quiet_data, None, "plain_history")
    _, _, lengths = quiet_data.to_arrays()
    live = np.arange(w.shape[1])[None, :] < lengths[:, None]
    assert np.all(w[live] == 1.0) and not w[~live].any()


def _balanced_dataset():
    cov = np.array([[30.0, 2.0], [32.5, 0.0], [30.0, 0.0]])
    trs = [Trajectory(cov.copy(), np.array(a), i, Termination.HORIZON) for i, a in enumerate([[0, 1], [1, 0]])]
    return BatchDataset(trs, SimConfig(max_horizon=2), "hand", 0)


def test_iptw_equals_plain_under_constant_half_propensity():
    ds = _balanced_dataset()
    prop = constant_propensity(ds.sim_config, 0.0)
    w_iptw = cfmodel.training_weights(ds, prop, "iptw_history")
    w_plain = cfmodel.training_weights(ds, None, "plain_history")
    ratio = w_iptw[w_plain > 0] / w_plain[w_plain > 0]
    assert np.all(ratio == ratio[0])


def test_iptw_weights_are_clipped(coin_dataset):
    prop = constant_propensity(coin_dataset.sim_config, 6.0)
    w = cfmodel.iptw_weights(prop, coin_dataset)
    _, _, lengths = coin_dataset.to_arrays()
    live = np.arange(w.shape[1])[None, :] < lengths[:, None]
    assert w[live].min() >= 0.1 and w[live].max() <= 10.0
    assert w[live].max() == 10.0


def test_non_finite_weight_names_the_record(coin_dataset):
    prop = constant_propensity(coin_dataset.sim_config, 1e3)
    with pytest.raises(NumericFailure, match="trajectory"):
        cfmodel.iptw_weights(prop, coin_dataset)


def test_propensity_refuses_without_overlap():
    ds = cohort.generate(always_treat(), SimConfig(), 50, 1)
    hyper = cfmodel.FitHyper(hidden_dim=4, iterations=2)
    with pytest.raises(OverlapViolation):
        cfmodel.fit_propensity(ds, hyper)
    with pytest.warns(UserWarning, match="overlap"):
        model = cfmodel.fit_propensity(ds, hyper, force=True)
    p = model.treat_probability(PrefixTable.from_dataset(ds))
    assert np.all((p > 0) & (p < 1))


def test_iptw_mode_needs_propensity(coin_dataset):
    with pytest.raises(InvalidArgument):
        cfmodel.fit_dynamics(coin_dataset, None, "iptw_history", cfmodel.FitHyper(iterations=1))
    with pytest.raises(InvalidArgument):
        cfmodel.fit_dynamics(coin_dataset, None, "crn", cfmodel.FitHyper(iterations=1))


def test_short_fits_are_deterministic(coin_dataset):
    hyper = cfmodel.FitHyper(hidden_dim=6, batch_size=16, iterations=30)
    prop = cfmodel.fit_propensity(coin_dataset, hyper, seed=3)
    a = cfmodel.fit_dynamics(coin_dataset, prop, "iptw", hyper, seed=3)
    b = cfmodel.fit_dynamics(coin_dataset, prop, "iptw", hyper, seed=3)
    assert a.net.equals(b.net) and a.mode == "iptw_history"
    m = cfmodel.fit_dynamics(coin_dataset, None, "plain-x", hyper, seed=3)
    assert m.memoryless and m.net.input_dim == 3


def test_propensity_probability_of_matches_table(coin_dataset):
    hyper = cfmodel.FitHyper(hidden_dim=6, batch_size=16, iterations=20)
    prop = cfmodel.fit_propensity(coin_dataset, hyper, seed=1)
    prefix = PrefixTable.from_dataset(coin_dataset)
    table = prop.treat_probability(prefix)
    for r in range(0, prefix.size, 53):
        tr = coin_dataset.trajectories[prefix.traj[r]]
        t = prefix.t[r]
        assert prop.probability_of(History(tr.covariates[: t + 1], tr.actions[:t])) == pytest.approx(table[r])


def test_rmse_of_the_oracle_is_zero(quiet_data):
    oracle = OracleDynamics(QUIET)
    assert cfmodel.factual_rmse(oracle, quiet_data) == pytest.approx(0.0, abs=1e-12)
    assert cfmodel.counterfactual_rmse(oracle, quiet_data) == 0.0
    assert cfmodel.counterfactual_rmse(OracleDynamics(QUIET, bias=(1.0, 0.0)), quiet_data) > 0.0


def test_propensity_on_a_fair_coin_stays_near_half():
    data = cohort.generate(uniform_random(), SimConfig(), 1000, 23)
    train, held = data.split(0.9)
    model = cfmodel.fit_propensity(train, cfmodel.FitHyper(hidden_dim=16, iterations=1000), seed=2)
    p = model.treat_probability(PrefixTable.from_dataset(held))
    assert np.abs(p - 0.5).mean() < 0.05
