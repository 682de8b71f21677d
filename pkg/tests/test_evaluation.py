import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmce.environments import EX2_REWARDS, GridConfig, build_gridworld, gridworld_rewards, random_dag
from gmce.evaluation import (
    METRIC_LABELS,
    MatchReport,
    UnreachableError,
    dataset_log_prob,
    export_reward_table,
    matching_fraction,
    matching_metrics,
    most_likely_path,
    path_log_prob,
    read_reward_table_csv,
    reward_table,
    reward_table_csv,
)
from gmce.gfunc import GSpec
from gmce.mdp import FeatureSet, TabularMdp, Trajectory
from gmce.solver import RewardModel, enumerate_paths, gmce_backward, mce_backward, trajectory_log_prob
from gmce.training import FittedModel


def ex2_policy(ex2, mu1):
    mdp, features = ex2
    mu = np.ones(6)
    mu[1] = mu1
    return gmce_backward(mdp, features, RewardModel(EX2_REWARDS), GSpec(mu))


def test_single_route():
    mdp = TabularMdp.build(3, [[1], [2], [2]], {(0, 1): [(1, 1.0)], (1, 2): [(2, 1.0)], (2, 2): [(2, 1.0)]}, 4, [2])
    fs = FeatureSet.build({k: [1.0] for k in mdp.transitions}, {s: [1.0] for s in range(3)})
    policy = gmce_backward(mdp, fs, RewardModel([-1.0]), GSpec([1.0]))
    path = most_likely_path(policy, mdp, 0, 2)
    assert path.states == (0, 1, 2) and path.actions == (1, 2)
    assert path.log_prob == trajectory_log_prob(policy, Trajectory.of([(0, 1), (1, 2)])) == 0.0


def test_example2_decodes_direct_route(ex2):
    # [DERIVED] P({0,2,5}) = 1/(1+sqrt 2) is the largest of the three at mu(1)=0.5
    path = most_likely_path(ex2_policy(ex2, 0.5), ex2[0], 0, 5)
    assert path.states == (0, 2, 5)
    assert math.exp(path.log_prob) == pytest.approx(1 / (1 + math.sqrt(2)), rel=1e-12)


def test_example2_tie_break(ex2):
    path = most_likely_path(ex2_policy(ex2, 1.0), ex2[0], 0, 5)
    assert path.actions == (1, 3, 5)
    assert math.exp(path.log_prob) == pytest.approx(1 / 3, abs=1e-12)


def test_origin_equals_dest(ex2):
    path = most_likely_path(ex2_policy(ex2, 1.0), ex2[0], 2, 2)
    assert path.states == (2,) and path.actions == () and path.log_prob == 0.0


def test_unreachable(ex2):
    with pytest.raises(UnreachableError):
        most_likely_path(ex2_policy(ex2, 1.0), ex2[0], 2, 1)
    with pytest.raises(UnreachableError):
        most_likely_path(ex2_policy(ex2, 1.0), ex2[0], 0, 5, max_len=1)
    with pytest.raises(ValueError):
        most_likely_path(ex2_policy(ex2, 1.0), ex2[0], 0, 5, max_len=99)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(3, 9), mu_value=st.floats(0.2, 2.0))
def test_decoder_optimal_on_dags(seed, n, mu_value):
    rng = np.random.default_rng(seed)
    mdp, features = random_dag(rng, n)
    theta = rng.normal(size=2)
    policy = gmce_backward(mdp, features, RewardModel(theta), GSpec([mu_value]))
    dest = n - 1
    paths = enumerate_paths(mdp, 0, dest, mdp.horizon)
    best = max(trajectory_log_prob(policy, Trajectory.of(p.steps)) for p in paths)
    decoded = most_likely_path(policy, mdp, 0, dest)
    assert decoded.log_prob == pytest.approx(best, abs=1e-12)
    assert decoded.log_prob == pytest.approx(trajectory_log_prob(policy, decoded.trajectory), abs=1e-12)


def brute_force_best(policy, mdp, origin, dest, max_len):
    """[DERIVED] exhaustive search over (action, next state) sequences."""
    best = -math.inf
    stack = [(origin, 0, 0.0)]
    while stack:
        s, k, lp = stack.pop()
        if s == dest:
            best = max(best, lp)
            continue
        if k == max_len:
            continue
        for a in mdp.actions[s]:
            for nxt, p in mdp.successors(s, a):
                stack.append((nxt, k + 1, lp + policy.log_prob(k, s, a) + math.log(p)))
    return best


@pytest.mark.parametrize("seed", range(5))
def test_decoder_optimal_stochastic(seed):
    rng = np.random.default_rng(seed)
    cfg = GridConfig(2, 2, 0.7, horizon=4)
    mdp, features = build_gridworld(cfg)
    policy = gmce_backward(mdp, features, RewardModel(rng.normal(size=4)), GSpec(rng.uniform(0.3, 1.5, 4)))
    decoded = most_likely_path(policy, mdp, 0, 3)
    assert decoded.log_prob == pytest.approx(brute_force_best(policy, mdp, 0, 3, 4), abs=1e-12)
    assert decoded.log_prob == path_log_prob(policy, mdp, decoded.states, decoded.actions)


def test_matching_arithmetic():
    assert matching_fraction([0, 1, 2], [0, 1, 2]) == 1.0
    assert matching_fraction([0, 1, 2, 9], [0, 1, 2, 3]) == 0.75
    assert matching_fraction([0, 1], [0, 0, 1, 1]) == 1.0  # set semantics
    assert matching_fraction([1], []) == 0.0
    report = MatchReport([1.0, 0.8])
    assert report.avg_matching == pytest.approx(0.9)
    assert report.ninety_matching == 0.5
    assert MatchReport([]).avg_matching == 0.0


@settings(max_examples=200)
@given(a=st.lists(st.integers(0, 20), max_size=15), b=st.lists(st.integers(0, 20), min_size=1, max_size=15))
def test_matching_in_unit_interval(a, b):
    assert 0.0 <= matching_fraction(a, b) <= 1.0
    assert matching_fraction(b, b) == 1.0


@pytest.fixture(scope="module")
def grid_setup():
    cfg = GridConfig()
    mdp, features = build_gridworld(cfg)
    truth = gridworld_rewards(cfg)
    policy = mce_backward(mdp, features, RewardModel(truth))
    from gmce.environments import generate_dataset, value_iteration

    expert, _ = value_iteration(mdp, features.reward_tensor(mdp) @ truth)
    ds = generate_dataset(mdp, expert, 30, 0.5, 0)
    return mdp, features, truth, policy, ds


def test_matching_metrics_ranges(grid_setup):
    mdp, _, _, policy, ds = grid_setup
    report = matching_metrics(policy, mdp, ds.test)
    assert len(report.per_trajectory) == len(ds.test)
    assert all(0 <= m <= 1 for m in report.per_trajectory)
    assert 0 < report.mean_path_prob <= 1
    data = report.to_dict()
    for label in ("Avg. Matching", "90% Matching", "Prob. of most likely path"):
        assert label in data
    assert set(METRIC_LABELS.values()) >= {"Avg. Matching", "90% Matching"}
    assert math.isfinite(dataset_log_prob(policy, ds.test))


def test_matching_self_path(grid_setup):
    mdp, _, _, policy, _ = grid_setup
    decoded = most_likely_path(policy, mdp, 0, 24)
    observed = Trajectory.of(decoded.trajectory.steps + ((24, 4),))
    report = matching_metrics(policy, mdp, [observed])
    assert report.per_trajectory == [1.0]
    assert report.path_probs[0] == pytest.approx(math.exp(decoded.log_prob))


def test_matching_unreachable_flagged(ex2):
    policy = ex2_policy(ex2, 1.0)
    trajs = [Trajectory.of([(2, 5), (5, 5)]), Trajectory.of([(0, 1), (1, 3), (3, 5)])]
    report = matching_metrics(policy, ex2[0], trajs, max_len=1)
    assert report.per_trajectory == [1.0, 0.0] and report.unreachable == [1]
    assert report.path_probs[1] == 0.0


def test_matching_threads_identical(grid_setup, monkeypatch):
    mdp, _, _, policy, ds = grid_setup
    serial = matching_metrics(policy, mdp, ds.test).to_dict()
    monkeypatch.setenv("GMCE_THREADS", "4")
    assert matching_metrics(policy, mdp, ds.test).to_dict() == serial


def test_reward_table_zero_and_truth(grid_setup, tmp_path):
    mdp, features, truth, _, _ = grid_setup
    spec = GSpec(np.ones(25))
    zero = reward_table(np.zeros(25), spec, features, mdp)
    assert np.all(zero.rewards == 0) and np.all(zero.mu == 1)
    model = FittedModel(truth, spec)
    table = export_reward_table(model, features, mdp, tmp_path, grid_shape=(5, 5))
    expected = np.full(25, -10.0)
    expected[24] = 0.0
    np.testing.assert_array_equal(table.rewards, expected)
    back = read_reward_table_csv(tmp_path / "reward_table.csv")
    assert np.array_equal(back.rewards, table.rewards) and np.array_equal(back.mu, table.mu)
    assert (tmp_path / "reward_table.svg").read_text().startswith("<?xml")
    header = reward_table_csv(table, (5, 5)).splitlines()[:2]
    assert header == ["state,x,y,reward,mu", "0,0,0,-10.0,1.0"]


def test_reward_table_svg_deterministic(grid_setup, tmp_path):
    mdp, features, truth, _, _ = grid_setup
    model = FittedModel(truth, GSpec(np.ones(25)))
    export_reward_table(model, features, mdp, tmp_path / "a", grid_shape=(5, 5))
    export_reward_table(model, features, mdp, tmp_path / "b", grid_shape=(5, 5))
    for name in ("reward_table.csv", "reward_table.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
