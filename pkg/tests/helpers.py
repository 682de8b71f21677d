"""Shared builders for the test suite."""

import numpy as np

from gmce.environments import EX2_REWARDS, ThreePathConfig, build_three_path, generate_dataset, random_instance
from gmce.gfunc import GSpec
from gmce.mdp import FeatureSet, Trajectory
from gmce.solver import RewardModel, gmce_backward, trajectory_log_prob

EX2_PATHS = {
    "0135": Trajectory.of([(0, 1), (1, 3), (3, 5)]),
    "0145": Trajectory.of([(0, 1), (1, 4), (4, 5)]),
    "025": Trajectory.of([(0, 2), (2, 5)]),
}


def ex2_path_probs(mu1=1.0, r4=None):
    """Probabilities of the three routes of example 2 with one-hot mu features."""
    mdp, features = build_three_path(ThreePathConfig(2))
    theta = np.array(EX2_REWARDS)
    if r4 is not None:
        theta[4] = r4
    mu = np.ones(mdp.n_states)
    mu[1] = mu1
    policy = gmce_backward(mdp, features, RewardModel(theta), GSpec(mu))
    return {k: float(np.exp(trajectory_log_prob(policy, tr))) for k, tr in EX2_PATHS.items()}


def unit_mu_features(features):
    """Same reward features, constant state feature 1 (so theta_mu=[1] means mu=1)."""
    return FeatureSet.build(features.reward_features, {s: np.ones(1) for s in features.state_features})


def sample_trajectories(mdp, policy, n, seed, starts=None):
    """Rollouts of ``policy`` from a cycle of start states."""
    starts = list(range(mdp.n_states)) if starts is None else starts
    out = []
    for i in range(n):
        ds = generate_dataset(mdp, policy, 1, 1.0, seed + 1000 * i, start=starts[i % len(starts)])
        out.extend(ds.train)
    return out


def random_gradient_config(rng, link, clamped):
    """Random small instance, parameters and dataset for gradient checks.

    With ``clamped`` (linear link only) at least one state sits in the floored
    region; linear pre-activations stay at least 1e-3 away from the kink.
    """
    mdp, features = random_instance(rng, n_states=int(rng.integers(1, 6)), n_actions=int(rng.integers(1, 5)), horizon=int(rng.integers(1, 6)))
    phi = features.state_matrix(mdp.n_states)
    while True:
        if link == "log":
            theta_mu = rng.normal(scale=0.5, size=phi.shape[1])
            break
        theta_mu = rng.uniform(0.3, 1.5, size=phi.shape[1])
        if clamped:
            theta_mu[0] = -rng.uniform(2.0, 4.0)
        z = phi @ theta_mu
        if np.all(np.abs(z) > 1e-3) and (not clamped or np.any(z < 0)) and (clamped or np.all(z > 0.05)):
            break
    gspec = GSpec(theta_mu, link=link)
    reward = RewardModel(rng.normal(size=features.d_reward))
    policy = gmce_backward(mdp, features, reward, gspec)
    trajs = sample_trajectories(mdp, policy, int(rng.integers(1, 6)), int(rng.integers(1 << 30)))
    return mdp, features, reward, gspec, trajs
