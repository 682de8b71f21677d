"""Built-in benchmark MDPs and demonstration generators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .mdp import Dataset, FeatureSet, TabularMdp, Trajectory
from .solver import Policy

# Three-path networks: links are states, an action moves to the next link and
# carries that link's id. The last state is the absorbing destination.
THREE_PATH_EDGES = {
    1: {0: (1, 2, 3), 1: (4,), 2: (4,), 3: (4,)},
    2: {0: (1, 2), 1: (3, 4), 2: (5,), 3: (5,), 4: (5,)},
}
EX2_REWARDS = (0.0, -4.0, -5.0, -1.0, -1.0, 0.0)


@dataclass(frozen=True)
class ThreePathConfig:
    example: int = 2
    state_rewards: tuple[float, ...] | None = None
    horizon: int | None = None

    def rewards(self) -> tuple[float, ...]:
        if self.state_rewards is not None:
            return tuple(float(r) for r in self.state_rewards)
        return EX2_REWARDS if self.example == 2 else (0.0, -1.0, -1.0, -1.0, 0.0)


def build_three_path(config: ThreePathConfig = ThreePathConfig()) -> tuple[TabularMdp, FeatureSet]:
    """Deterministic Fig.-1 style network with one-hot state features.

    The reward of leaving a state is that state's reward, so a path's return
    is the sum of the rewards of the links it traverses before the
    destination. The destination's self-loop has a zero feature vector.
    """
    if config.example not in THREE_PATH_EDGES:
        raise ValueError(f"unknown example {config.example}")
    edges = THREE_PATH_EDGES[config.example]
    n = len(edges) + 1
    dest = n - 1
    actions = [edges.get(s, (dest,)) for s in range(n)]
    transitions = {(s, a): [(a, 1.0)] for s, acts in enumerate(actions) for a in acts}
    horizon = config.horizon if config.horizon is not None else n - 1
    mdp = TabularMdp.build(n, actions, transitions, horizon, [dest])
    eye = np.eye(n)
    rf = {(s, a): (eye[s] if s != dest else np.zeros(n)) for s, acts in enumerate(actions) for a in acts}
    sf = {s: eye[s] for s in range(n)}
    return mdp, FeatureSet.build(rf, sf)


def three_path_theta(config: ThreePathConfig = ThreePathConfig()) -> np.ndarray:
    """Reward parameters reproducing ``config``'s per-state rewards."""
    return np.array(config.rewards(), dtype=float)


# ---------------------------------------------------------------- grid world

LEFT, RIGHT, UP, DOWN, STAY = range(5)
ACTION_NAMES = ("left", "right", "up", "down", "stay")
_MOVES = {LEFT: (-1, 0), RIGHT: (1, 0), UP: (0, 1), DOWN: (0, -1), STAY: (0, 0)}


@dataclass(frozen=True)
class GridConfig:
    """Grid of ``width x height`` cells; state ``y * width + x`` with ``y = 0`` the bottom row."""

    width: int = 5
    height: int = 5
    slip: float = 0.8
    start: int | None = None
    terminal: int | None = None
    step_reward: float = -10.0
    terminal_reward: float = 0.0
    horizon: int = 50

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def start_state(self) -> int:
        return 0 if self.start is None else self.start

    @property
    def terminal_state(self) -> int:
        return self.n_states - 1 if self.terminal is None else self.terminal

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        if not 0 < self.slip <= 1:
            raise ValueError("slip must be in (0, 1]")
        if self.start_state == self.terminal_state:
            raise ValueError("start and terminal must differ")
        for s in (self.start_state, self.terminal_state):
            if not 0 <= s < self.n_states:
                raise ValueError(f"state {s} outside the grid")


def grid_cell(config: GridConfig, s: int) -> tuple[int, int]:
    return s % config.width, s // config.width


def build_gridworld(config: GridConfig = GridConfig()) -> tuple[TabularMdp, FeatureSet]:
    """Slippery grid: the chosen move succeeds with probability ``slip``,
    otherwise one of the other feasible moves happens, uniformly.

    Moves leaving the grid are not feasible. The terminal cell only has
    ``STAY``; its reward features are zero.
    """
    config.validate()
    W, H, S = config.width, config.height, config.n_states
    term = config.terminal_state
    actions, transitions = [], {}
    for s in range(S):
        x, y = grid_cell(config, s)
        if s == term:
            acts = (STAY,)
        else:
            acts = tuple(a for a in range(5) if 0 <= x + _MOVES[a][0] < W and 0 <= y + _MOVES[a][1] < H)
        actions.append(acts)
        dest = {a: s + _MOVES[a][0] + W * _MOVES[a][1] for a in acts}
        for a in acts:
            if len(acts) == 1:
                transitions[(s, a)] = [(dest[a], 1.0)]
                continue
            others = (1.0 - config.slip) / (len(acts) - 1)
            row = {dest[a]: config.slip}
            if others > 0:
                for b in acts:
                    if b != a:
                        row[dest[b]] = row.get(dest[b], 0.0) + others
            transitions[(s, a)] = sorted(row.items())
    mdp = TabularMdp.build(S, actions, transitions, config.horizon, [term])
    eye = np.eye(S)
    rf = {(s, a): (eye[s] if s != term else np.zeros(S)) for s, acts in enumerate(actions) for a in acts}
    sf = {s: eye[s] for s in range(S)}
    return mdp, FeatureSet.build(rf, sf)


def gridworld_rewards(config: GridConfig = GridConfig()) -> np.ndarray:
    """Ground-truth per-cell rewards (also the reward parameters under one-hot features)."""
    r = np.full(config.n_states, float(config.step_reward))
    r[config.terminal_state] = config.terminal_reward
    return r


def _reward_array(mdp: TabularMdp, rewards) -> np.ndarray:
    if isinstance(rewards, Mapping):
        out = np.zeros(mdp.dense.mask.shape)
        for (s, a), k in mdp.dense.slot.items():
            out[s, k] = rewards[(s, a)]
        return out
    return np.asarray(rewards, dtype=float)


def value_iteration(mdp: TabularMdp, rewards, tol: float = 1e-9, max_iter: int = 100_000):
    """Undiscounted Bellman value iteration to a fixed point.

    ``rewards`` is a slot-aligned (S, A) array or a mapping ``(s, a) -> r``.
    Requires an absorbing zero-reward terminal reachable under every greedy
    policy. Returns ``(policy, values)`` where ``policy`` maps each state to
    its greedy action, ties going to the lowest action id.
    """
    dense = mdp.dense
    R = _reward_array(mdp, rewards)
    for t in mdp.terminals:
        if np.any(R[t][dense.mask[t]] != 0):
            raise ValueError(f"terminal {t} must have zero reward")
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = np.where(dense.mask, R + dense.trans @ V, -np.inf)
        V_new = Q.max(axis=1)
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        if residual <= tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge in {max_iter} iterations (residual {residual:.3g})")
    Q = np.where(dense.mask, R + dense.trans @ V, -np.inf)
    policy = {}
    for s, acts in enumerate(mdp.actions):
        best = Q[s].max()
        near = [a for k, a in enumerate(acts) if Q[s, k] >= best - tol]
        policy[s] = min(near)
    return policy, V


def _sample_action(expert, t, s, mdp, rng):
    if isinstance(expert, Policy):
        acts = mdp.actions[s]
        p = np.exp(expert.log_p[t, s, : len(acts)])
        return acts[int(rng.choice(len(acts), p=p / p.sum()))]
    return expert[s]


def generate_dataset(mdp: TabularMdp, expert_policy, n_trajectories: int, split_fraction: float, seed: int, start: int = 0) -> Dataset:
    """Roll out the expert from ``start`` until a terminal is recorded or the horizon.

    ``expert_policy`` is either a mapping ``state -> action`` or a
    :class:`Policy` sampled per step. Trajectory ``i`` uses seed
    ``seed + i``. The first ``ceil(split_fraction * n)`` trajectories form the
    training split.
    """
    if not 0 <= split_fraction <= 1:
        raise ValueError("split_fraction must be in [0, 1]")
    trajs, truncated = [], []
    for i in range(n_trajectories):
        rng = np.random.default_rng(seed + i)
        s, steps = start, []
        for t in range(mdp.horizon):
            a = mdp.actions[s][0] if s in mdp.terminals else _sample_action(expert_policy, t, s, mdp, rng)
            steps.append((s, a))
            if s in mdp.terminals:
                break
            succ = mdp.successors(s, a)
            probs = np.array([p for _, p in succ])
            s = succ[int(rng.choice(len(succ), p=probs / probs.sum()))][0]
        if steps[-1][0] not in mdp.terminals:
            truncated.append(i)
        trajs.append(Trajectory.of(steps))
    n_train = math.ceil(split_fraction * n_trajectories - 1e-9)
    meta = {
        "seed": seed,
        "n_trajectories": n_trajectories,
        "split_fraction": split_fraction,
        "n_train": n_train,
        "start": start,
        "truncated": truncated,
    }
    return Dataset(tuple(trajs[:n_train]), tuple(trajs[n_train:]), meta)


# ------------------------------------------------------- synthetic road net

ROADNET_THETA_R = np.array([-1.0, -0.5])
ROADNET_THETA_MU = np.array([0.0, -0.25, 1.25])


@dataclass(frozen=True)
class RoadNet:
    mdp: TabularMdp
    features: FeatureSet
    origin: int
    blocks: tuple[tuple[int, ...], ...] = field(default=())


def build_synthetic_roadnet(n_nodes: int, overlap_blocks: int, seed: int, branching: int = 3) -> RoadNet:
    """Random out-tree of links rooted at link 0 with planted overlap gadgets.

    Each gadget hangs off a random tree link ``u`` and adds links
    ``a, b, c, d, w`` with ``u->a, u->d, a->b, a->c, b->w, c->w, d->w``: two
    routes sharing ``a`` next to one independent route, all merging at the
    absorbing link ``w``. Leaves are absorbing. Reward features of a move are
    ``[length of the entered link, left-turn indicator]``; G features are
    ``[in-degree, out-degree, 1]``.
    """
    if n_nodes < 4:
        raise ValueError("n_nodes must be at least 4")
    rng = np.random.default_rng(seed)
    children: dict[int, list[int]] = {0: []}
    for v in range(1, n_nodes):
        open_nodes = [u for u in children if len(children[u]) < branching]
        u = open_nodes[int(rng.integers(len(open_nodes)))]
        children[u].append(v)
        children[v] = []
    blocks = []
    nxt = n_nodes
    for _ in range(overlap_blocks):
        u = int(rng.integers(n_nodes))
        a, b, c, d, w = range(nxt, nxt + 5)
        nxt += 5
        children[u] += [a, d]
        children.update({a: [b, c], b: [w], c: [w], d: [w], w: []})
        blocks.append((u, a, d, b, c, w))
    S = nxt
    terminals = [s for s in range(S) if not children[s]]
    actions = [tuple(children[s]) if children[s] else (s,) for s in range(S)]
    transitions = {(s, a): [(a, 1.0)] for s, acts in enumerate(actions) for a in acts}
    in_deg = np.zeros(S)
    for s in range(S):
        for v in children[s]:
            in_deg[v] += 1
    depth = _longest_path(children, 0)
    mdp = TabularMdp.build(S, actions, transitions, depth + 1, terminals)
    length = rng.uniform(0.5, 2.0, size=S)
    rf = {}
    for s, acts in enumerate(actions):
        for a in acts:
            if s in terminals:
                rf[(s, a)] = np.zeros(2)
            else:
                rf[(s, a)] = np.array([length[a], float(rng.random() < 0.3)])
    sf = {s: np.array([in_deg[s], float(len(children[s])), 1.0]) for s in range(S)}
    return RoadNet(mdp, FeatureSet.build(rf, sf), 0, tuple(blocks))


def _longest_path(children, root):
    memo = {}

    def depth(u):
        if u not in memo:
            memo[u] = max((1 + depth(v) for v in children[u]), default=0)
        return memo[u]

    return depth(root)


# ------------------------------------------------------ random test instances


def random_instance(rng, n_states=None, n_actions=None, horizon=None, d_r=3, d_mu=2, stochastic=True):
    """Small random MDP with dense random features, for property tests."""
    S = n_states or int(rng.integers(1, 7))
    A = n_actions or 4
    T = horizon or int(rng.integers(1, 7))
    actions, transitions = [], {}
    for s in range(S):
        k = int(rng.integers(1, A + 1))
        acts = tuple(sorted(rng.choice(A, size=k, replace=False).tolist()))
        actions.append(acts)
        for a in acts:
            if stochastic:
                support = rng.choice(S, size=int(rng.integers(1, S + 1)), replace=False)
                p = rng.dirichlet(np.ones(len(support)))
                p[-1] = 1.0 - p[:-1].sum()
                transitions[(s, a)] = [(int(n), float(q)) for n, q in zip(support, p)]
            else:
                transitions[(s, a)] = [(int(rng.integers(S)), 1.0)]
    mdp = TabularMdp.build(S, actions, transitions, T)
    rf = {(s, a): rng.normal(size=d_r) for s, acts in enumerate(actions) for a in acts}
    sf = {s: rng.uniform(0.2, 1.5, size=d_mu) for s in range(S)}
    return mdp, FeatureSet.build(rf, sf)


def random_dag(rng, n_states: int, max_actions: int = 3, d_r: int = 2):
    """Deterministic layered DAG whose last state is an absorbing sink.

    Every action of a non-sink state moves to a strictly larger state id, so
    every path from state 0 reaches the sink within ``n_states - 1`` steps.
    """
    S = n_states
    sink = S - 1
    actions, transitions = [], {}
    for s in range(S):
        if s == sink:
            acts = (0,)
            transitions[(s, 0)] = [(s, 1.0)]
        else:
            k = int(rng.integers(1, max_actions + 1))
            acts = tuple(range(k))
            for a in acts:
                transitions[(s, a)] = [(int(rng.integers(s + 1, S)), 1.0)]
        actions.append(acts)
    mdp = TabularMdp.build(S, actions, transitions, S - 1, [sink])
    rf = {(s, a): (rng.normal(size=d_r) if s != sink else np.zeros(d_r)) for s, acts in enumerate(actions) for a in acts}
    sf = {s: np.ones(1) for s in range(S)}
    return mdp, FeatureSet.build(rf, sf)
