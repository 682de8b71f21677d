"""Most-likely-path decoding, path-matching metrics and reward tables."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .gfunc import GSpec
from .io import atomic_write_text
from .mdp import FeatureSet, TabularMdp, Trajectory
from .solver import Policy, trajectory_log_prob

METRIC_LABELS = {
    "test_log_prob": "Log Prob. (test)",
    "avg_matching": "Avg. Matching",
    "ninety_matching": "90% Matching",
    "mean_path_prob": "Prob. of most likely path",
}


class UnreachableError(ValueError):
    pass


class DecodedPath(NamedTuple):
    states: tuple[int, ...]
    actions: tuple[int, ...]
    log_prob: float

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory.of(zip(self.states, self.actions))


def path_log_prob(policy: Policy, mdp: TabularMdp, states: Sequence[int], actions: Sequence[int], time_offset: int = 0) -> float:
    """Probability of a state-action sequence, transition terms included."""
    lp = trajectory_log_prob(policy, Trajectory.of(zip(states, actions)), time_offset)
    for s, a, nxt in zip(states, actions, states[1:]):
        lp += float(np.log(mdp.transition_prob(s, a, nxt)))
    return lp


def most_likely_path(policy: Policy, mdp: TabularMdp, origin: int, dest: int, max_len: int | None = None, time_offset: int = 0) -> DecodedPath:
    """Viterbi decoding of the most probable route from ``origin`` to ``dest``.

    Maximizes ``sum_t ln P(a_t|s_t) + ln p(s_{t+1}|s_t, a_t)`` over sequences
    that first reach ``dest`` within ``max_len`` steps. Near-ties (relative
    1e-12) go to the lexicographically smallest ``(action, next state)``
    sequence.
    """
    T = policy.horizon - time_offset
    max_len = T if max_len is None else max_len
    if max_len > T:
        raise ValueError(f"max_len {max_len} exceeds remaining horizon {T}")
    dense = mdp.dense
    S = mdp.n_states
    with np.errstate(divide="ignore"):
        log_trans = np.log(dense.trans)
    V = np.full(S, -np.inf)
    V[dest] = 0.0
    choice = [None] * max_len
    for k in range(max_len - 1, -1, -1):
        t = time_offset + k
        cand = policy.log_p[t][:, :, None] + log_trans + V[None, None, :]
        V_new = np.full(S, -np.inf)
        pick = {}
        for s in range(S):
            if s == dest:
                continue
            m = cand[s].max()
            if not np.isfinite(m):
                continue
            ks, ns = np.nonzero(cand[s] >= m - 1e-12 * max(1.0, abs(m)))
            a, nxt = min(zip(dense.action_ids[s, ks].tolist(), ns.tolist()))
            pick[s] = (a, nxt)
            V_new[s] = cand[s, dense.slot[(s, a)], nxt]
        V_new[dest] = 0.0
        V = V_new
        choice[k] = pick
    if not np.isfinite(V[origin]):
        raise UnreachableError(f"state {dest} unreachable from {origin} within {max_len} steps")
    states, actions = [origin], []
    s = origin
    for k in range(max_len):
        if s == dest:
            break
        a, s = choice[k][s]
        actions.append(a)
        states.append(s)
    return DecodedPath(tuple(states), tuple(actions), path_log_prob(policy, mdp, states, actions, time_offset))


def matching_fraction(decoded_states: Sequence[int], observed_states: Sequence[int]) -> float:
    """Share of the observed trajectory's distinct states that the decoded path visits."""
    observed = set(observed_states)
    if not observed:
        return 0.0
    return len(set(decoded_states) & observed) / len(observed)


@dataclass
class MatchReport:
    per_trajectory: list[float]
    most_likely_paths: dict = field(default_factory=dict)
    unreachable: list[int] = field(default_factory=list)
    path_probs: list[float] = field(default_factory=list)

    @property
    def avg_matching(self) -> float:
        return float(np.mean(self.per_trajectory)) if self.per_trajectory else 0.0

    @property
    def ninety_matching(self) -> float:
        if not self.per_trajectory:
            return 0.0
        return float(np.mean([m >= 0.9 for m in self.per_trajectory]))

    @property
    def mean_path_prob(self) -> float:
        return float(np.mean(self.path_probs)) if self.path_probs else 0.0

    def to_dict(self) -> dict:
        return {
            METRIC_LABELS["avg_matching"]: self.avg_matching,
            METRIC_LABELS["ninety_matching"]: self.ninety_matching,
            METRIC_LABELS["mean_path_prob"]: self.mean_path_prob,
            "per_trajectory": self.per_trajectory,
            "unreachable": self.unreachable,
            "most_likely_paths": [
                {"origin": o, "dest": d, "states": list(p.states), "actions": list(p.actions), "prob": float(np.exp(p.log_prob))}
                for (o, d), p in sorted(self.most_likely_paths.items())
            ],
        }


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GMCE_THREADS", "1")))
    except ValueError:
        return 1


def matching_metrics(policy: Policy, mdp: TabularMdp, test_set: Sequence[Trajectory], max_len: int | None = None) -> MatchReport:
    """Decode a route for each test trajectory's endpoints and score the overlap."""
    pairs = sorted({(tr.steps[0][0], tr.steps[-1][0]) for tr in test_set if len(tr)})

    def decode(pair):
        try:
            return pair, most_likely_path(policy, mdp, pair[0], pair[1], max_len)
        except UnreachableError:
            return pair, None

    n = _threads()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            decoded = dict(pool.map(decode, pairs))
    else:
        decoded = dict(map(decode, pairs))
    report = MatchReport([], {k: v for k, v in decoded.items() if v is not None})
    for i, tr in enumerate(test_set):
        path = decoded.get((tr.steps[0][0], tr.steps[-1][0])) if len(tr) else None
        if path is None:
            report.per_trajectory.append(0.0)
            report.unreachable.append(i)
            report.path_probs.append(0.0)
            continue
        report.per_trajectory.append(matching_fraction(path.states, tr.states))
        report.path_probs.append(float(np.exp(path.log_prob)))
    return report


def dataset_log_prob(policy: Policy, trajectories: Sequence[Trajectory]) -> float:
    return float(sum(trajectory_log_prob(policy, tr) for tr in trajectories))


class RewardTable(NamedTuple):
    rewards: np.ndarray
    mu: np.ndarray


def _display_action(mdp: TabularMdp, s: int) -> int:
    acts = mdp.actions[s]
    selfp = [mdp.transition_prob(s, a, s) for a in acts]
    return acts[int(np.argmax(selfp))]


def reward_table(theta_r, gspec: GSpec, features: FeatureSet, mdp: TabularMdp) -> RewardTable:
    """Per-state reward of the staying (most self-looping) action and ``mu(s)``."""
    theta_r = np.asarray(theta_r, dtype=float)
    rewards = np.array([features.reward_features[(s, _display_action(mdp, s))] @ theta_r for s in range(mdp.n_states)])
    mu = gspec.mu_values(features.state_matrix(mdp.n_states))
    return RewardTable(rewards, mu)


def reward_table_csv(table: RewardTable, grid_shape: tuple[int, int] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state", "x", "y", "reward", "mu"] if grid_shape else ["state", "reward", "mu"])
    for s, (r, m) in enumerate(zip(table.rewards, table.mu)):
        if grid_shape:
            w.writerow([s, s % grid_shape[0], s // grid_shape[0], repr(float(r)), repr(float(m))])
        else:
            w.writerow([s, repr(float(r)), repr(float(m))])
    return buf.getvalue()


def read_reward_table_csv(path) -> RewardTable:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return RewardTable(np.array([float(r["reward"]) for r in rows]), np.array([float(r["mu"]) for r in rows]))


def export_reward_table(model, features: FeatureSet, mdp: TabularMdp, out_dir=None, name: str = "reward_table", grid_shape=None, title: str | None = None) -> RewardTable:
    """Fitted per-state rewards and mu; writes ``<name>.csv`` and ``<name>.svg`` when ``out_dir`` is set.

    ``grid_shape = (width, height)`` lays the heatmap out as a grid with row
    0 at the bottom; otherwise states form a single row.
    """
    table = reward_table(model.theta_r, model.gspec, features, mdp)
    if out_dir is not None:
        from .plotting import reward_heatmaps

        out_dir = Path(out_dir)
        atomic_write_text(out_dir / f"{name}.csv", reward_table_csv(table, grid_shape))
        shape = (grid_shape[1], grid_shape[0]) if grid_shape else (1, mdp.n_states)
        reward_heatmaps(
            {title or name: table.rewards.reshape(shape), "mu": table.mu.reshape(shape)},
            out_dir / f"{name}.svg",
        )
    return table
