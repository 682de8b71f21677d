"""Finite-horizon tabular MDPs, feature tables and demonstration data."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

ROW_SUM_TOL = 1e-12


class DenseMdp(NamedTuple):
    """Slot-aligned array view of a :class:`TabularMdp`.

    Feasible actions of state ``s`` occupy slots ``0..n_actions[s]-1`` in the
    order given by ``TabularMdp.actions[s]``; the remaining slots are padding.
    """

    mask: np.ndarray  # (S, A) bool
    trans: np.ndarray  # (S, A, S) float
    action_ids: np.ndarray  # (S, A) int, -1 on padding
    slot: dict  # (state, action id) -> slot


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Undiscounted finite-horizon MDP with per-state feasible action sets.

    ``transitions`` maps ``(state, action)`` to a tuple of
    ``(next_state, probability)`` pairs. Construction does not enforce the
    model invariants; use :func:`validate_mdp` for that.
    """

    n_states: int
    actions: tuple[tuple[int, ...], ...]
    transitions: Mapping[tuple[int, int], tuple[tuple[int, float], ...]]
    horizon: int
    terminals: frozenset[int] = frozenset()

    @classmethod
    def build(cls, n_states, actions, transitions, horizon, terminals=()):
        actions = tuple(tuple(int(a) for a in acts) for acts in actions)
        trans = {
            (int(s), int(a)): tuple((int(n), float(p)) for n, p in row)
            for (s, a), row in transitions.items()
        }
        return cls(int(n_states), actions, trans, int(horizon), frozenset(int(t) for t in terminals))

    def with_horizon(self, horizon: int) -> "TabularMdp":
        return TabularMdp(self.n_states, self.actions, self.transitions, int(horizon), self.terminals)

    @property
    def max_actions(self) -> int:
        return max((len(a) for a in self.actions), default=0)

    @cached_property
    def dense(self) -> DenseMdp:
        S, A = self.n_states, self.max_actions
        mask = np.zeros((S, A), dtype=bool)
        trans = np.zeros((S, A, S))
        ids = np.full((S, A), -1, dtype=np.int64)
        slot = {}
        for s, acts in enumerate(self.actions):
            for k, a in enumerate(acts):
                mask[s, k] = True
                ids[s, k] = a
                slot[(s, a)] = k
                for nxt, p in self.transitions.get((s, a), ()):
                    if not 0 <= nxt < S:
                        raise ValueError(f"next state {nxt} out of range at ({s}, {a})")
                    trans[s, k, nxt] += p
        return DenseMdp(mask, trans, ids, slot)

    def successors(self, s: int, a: int) -> tuple[tuple[int, float], ...]:
        return self.transitions.get((s, a), ())

    def transition_prob(self, s: int, a: int, nxt: int) -> float:
        return sum(p for n, p in self.successors(s, a) if n == nxt)

    def is_deterministic(self) -> bool:
        return all(p in (0.0, 1.0) for row in self.transitions.values() for _, p in row)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_states": self.n_states,
            "horizon": self.horizon,
            "terminals": sorted(self.terminals),
            "actions": [list(a) for a in self.actions],
            "transitions": [
                {"s": s, "a": a, "to": [[n, p] for n, p in self.transitions[(s, a)]]}
                for s, acts in enumerate(self.actions)
                for a in acts
                if (s, a) in self.transitions
            ],
        }

    def __eq__(self, other):
        if not isinstance(other, TabularMdp):
            return NotImplemented
        return (
            self.n_states == other.n_states
            and self.actions == other.actions
            and dict(self.transitions) == dict(other.transitions)
            and self.horizon == other.horizon
            and self.terminals == other.terminals
        )


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Reward features per (state, action) and G-function features per state."""

    reward_features: Mapping[tuple[int, int], np.ndarray]
    state_features: Mapping[int, np.ndarray]

    @classmethod
    def build(cls, reward_features, state_features):
        rf = {(int(s), int(a)): np.asarray(v, dtype=float) for (s, a), v in reward_features.items()}
        sf = {int(s): np.asarray(v, dtype=float) for s, v in state_features.items()}
        return cls(rf, sf)

    @cached_property
    def d_reward(self) -> int:
        return _common_dim(self.reward_features.values(), "reward_features")

    @cached_property
    def d_mu(self) -> int:
        return _common_dim(self.state_features.values(), "state_features")

    def reward_tensor(self, mdp: TabularMdp) -> np.ndarray:
        """(S, A, d_R) reward features aligned with ``mdp.dense`` slots."""
        out = np.zeros((mdp.n_states, mdp.max_actions, self.d_reward))
        for (s, a), k in mdp.dense.slot.items():
            vec = self.reward_features.get((s, a))
            if vec is None:
                raise DimensionError(f"no reward features for (state={s}, action={a})")
            out[s, k] = vec
        return out

    def state_matrix(self, n_states: int) -> np.ndarray:
        out = np.zeros((n_states, self.d_mu))
        for s in range(n_states):
            vec = self.state_features.get(s)
            if vec is None:
                raise DimensionError(f"no state features for state {s}")
            out[s] = vec
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "reward_features": {f"{s},{a}": [float(x) for x in v] for (s, a), v in self.reward_features.items()},
            "state_features": {str(s): [float(x) for x in v] for s, v in self.state_features.items()},
        }

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return _same_vectors(self.reward_features, other.reward_features) and _same_vectors(
            self.state_features, other.state_features
        )


class DimensionError(ValueError):
    pass


def _common_dim(vectors, name):
    dims = {np.shape(v) for v in vectors}
    if len(dims) != 1:
        raise DimensionError(f"{name}: inconsistent vector shapes {sorted(dims)}")
    (shape,) = dims
    if len(shape) != 1:
        raise DimensionError(f"{name}: expected 1-d vectors, got shape {shape}")
    return shape[0]


def _same_vectors(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[tuple[int, int], ...]

    @classmethod
    def of(cls, steps: Sequence[Sequence[int]]) -> "Trajectory":
        return cls(tuple((int(s), int(a)) for s, a in steps))

    def __len__(self):
        return len(self.steps)

    @property
    def states(self) -> list[int]:
        return [s for s, _ in self.steps]

    @property
    def actions(self) -> list[int]:
        return [a for _, a in self.steps]


@dataclass(frozen=True)
class Dataset:
    train: tuple[Trajectory, ...] = ()
    test: tuple[Trajectory, ...] = ()
    metadata: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Violation:
    message: str
    state: int | None = None
    action: int | None = None
    step: int | None = None

    def __str__(self):
        return self.message


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


def validate_mdp(mdp: TabularMdp) -> ValidationReport:
    """Collect every violated model invariant; never raises."""
    out: list[Violation] = []
    if mdp.n_states < 1:
        out.append(Violation(f"n_states must be positive, got {mdp.n_states}"))
    if mdp.horizon < 1:
        out.append(Violation(f"horizon must be positive, got {mdp.horizon}"))
    if len(mdp.actions) != mdp.n_states:
        out.append(Violation(f"actions lists {len(mdp.actions)} states, expected {mdp.n_states}"))
    for s, acts in enumerate(mdp.actions):
        if not acts:
            out.append(Violation(f"state {s} has no feasible action", state=s))
        if len(set(acts)) != len(acts):
            out.append(Violation(f"duplicate action ids at state {s}", state=s))
        for a in acts:
            row = mdp.transitions.get((s, a))
            if row is None:
                out.append(Violation(f"missing transition row at ({s},{a})", s, a))
                continue
            total = 0.0
            for nxt, p in row:
                if not 0 <= nxt < mdp.n_states:
                    out.append(Violation(f"next state {nxt} out of range at ({s},{a})", s, a))
                if not (p >= 0.0 and np.isfinite(p)):
                    out.append(Violation(f"invalid probability {p} at ({s},{a})", s, a))
                total += p
            if abs(total - 1.0) > ROW_SUM_TOL:
                out.append(Violation(f"row sum {total:.12g} != 1 at ({s},{a})", s, a))
    for (s, a) in mdp.transitions:
        if not (0 <= s < len(mdp.actions)) or a not in mdp.actions[s]:
            out.append(Violation(f"transition for infeasible pair ({s},{a})", s, a))
    for t in sorted(mdp.terminals):
        if not 0 <= t < mdp.n_states:
            out.append(Violation(f"terminal {t} out of range", state=t))
            continue
        acts = mdp.actions[t] if t < len(mdp.actions) else ()
        if len(acts) != 1:
            out.append(Violation(f"terminal {t} must have exactly one action, has {len(acts)}", state=t))
            continue
        row = mdp.transitions.get((t, acts[0]), ())
        if sum(p for n, p in row if n == t) != 1.0:
            out.append(Violation(f"terminal {t} action is not a sure self-loop", t, acts[0]))
    return ValidationReport(tuple(out))


def validate_trajectory(mdp: TabularMdp, traj: Trajectory) -> ValidationReport:
    out: list[Violation] = []
    steps = traj.steps
    if len(steps) > mdp.horizon:
        out.append(Violation(f"trajectory length {len(steps)} exceeds horizon {mdp.horizon}"))
    for i, (s, a) in enumerate(steps):
        if not 0 <= s < mdp.n_states:
            out.append(Violation(f"step {i}: state {s} out of range", s, a, i))
            continue
        if a not in mdp.actions[s]:
            out.append(Violation(f"step {i}: action {a} infeasible at state {s}", s, a, i))
            continue
        if i + 1 < len(steps):
            nxt = steps[i + 1][0]
            if mdp.transition_prob(s, a, nxt) <= 0.0:
                out.append(Violation(f"step {i}: no transition ({s},{a}) -> {nxt}", s, a, i))
    return ValidationReport(tuple(out))
