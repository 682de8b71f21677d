"""Backward recursions for the generalized and classical causal-entropy models.

Everything runs in log space. For ``t = T-1 .. 0``::

    Y[a|s]     = lam * R(s, a) + sum_s' p(s'|s, a) * (nu(s') + mu(s') * lnZ[s'](t+1))
    lnZ[a|s]   = (Y[a|s] - nu(s)) / mu(s)
    lnZ[s]     = logsumexp_a lnZ[a|s]
    ln P(a|s)  = lnZ[a|s] - lnZ[s]

with ``lnZ[s](T) = 0``. The likelihood gradient is carried alongside as the
derivatives of ``Y``, ``lnZ[a|s]`` and ``lnZ[s]`` (the ``U``, ``D[a|s]/Z[a|s]``
and ``D[s]/Z[s]`` tables of the gradient recursion), so no ratio of raw
partition values is ever formed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .gfunc import GSpec
from .mdp import Dataset, FeatureSet, TabularMdp, Trajectory


class NumericalError(ArithmeticError):
    """A non-finite value appeared in a recursion."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


@dataclass(frozen=True, eq=False)
class Policy:
    """Time-indexed conditional action distribution of a finite-horizon model.

    Arrays are aligned with ``mdp.dense`` action slots; padding slots hold
    ``-inf`` in ``log_p`` and ``log_z_action``. ``log_z_state`` has ``T + 1``
    rows, the last being the zero boundary.
    """

    mdp: TabularMdp
    log_p: np.ndarray
    log_z_state: np.ndarray
    log_z_action: np.ndarray

    def __post_init__(self):
        T, S, A = self.log_p.shape
        if self.log_z_action.shape != (T, S, A) or self.log_z_state.shape != (T + 1, S):
            raise ValueError("inconsistent policy table shapes")

    @property
    def horizon(self) -> int:
        return self.log_p.shape[0]

    def log_prob(self, t: int, s: int, a: int) -> float:
        slot = self.mdp.dense.slot.get((s, a))
        if slot is None:
            raise ValueError(f"action {a} infeasible at state {s}")
        return float(self.log_p[t, s, slot])

    def prob(self, t: int, s: int, a: int) -> float:
        return float(np.exp(self.log_prob(t, s, a)))

    def probs(self, t: int, s: int) -> dict[int, float]:
        return {a: self.prob(t, s, a) for a in self.mdp.actions[s]}

    def normalization_error(self) -> float:
        """Largest |sum_a P(a|s) - 1| over all (t, s)."""
        if self.log_p.size == 0:
            return 0.0
        return float(np.max(np.abs(np.exp(self.log_p).sum(axis=2) - 1.0)))

    def to_dict(self) -> dict:
        entries = []
        for t in range(self.horizon):
            for s, acts in enumerate(self.mdp.actions):
                for k, a in enumerate(acts):
                    entries.append([t, s, a, float(self.log_p[t, s, k])])
        return {"horizon": self.horizon, "n_states": self.mdp.n_states, "log_p": entries}


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Linear reward ``R(s, a) = theta_r . F(s, a)`` scaled by ``lam``."""

    theta_r: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "theta_r", np.asarray(self.theta_r, dtype=float).reshape(-1))
        if not np.all(np.isfinite(self.theta_r)):
            raise ValueError("theta_r must be finite")

    def reward(self, features: FeatureSet, s: int, a: int) -> float:
        return float(features.reward_features[(s, a)] @ self.theta_r)

    def table(self, mdp: TabularMdp, features: FeatureSet) -> np.ndarray:
        """(S, A) slot-aligned rewards ``R(s, a)`` (without ``lam``); padding is 0."""
        if features.d_reward != self.theta_r.shape[0]:
            raise ValueError(f"theta_r has dimension {self.theta_r.shape[0]}, features {features.d_reward}")
        return features.reward_tensor(mdp) @ self.theta_r


class GradTables(NamedTuple):
    """Per-step derivative tables over the stacked parameters ``[theta_r; theta_mu]``.

    ``U`` is dY, ``D_action`` is d lnZ[a|s] and ``D_state`` is d lnZ[s]
    (``T + 1`` rows, zero at the horizon).
    """

    U: np.ndarray
    D_action: np.ndarray
    D_state: np.ndarray


class _Step(NamedTuple):
    t: int
    log_z_action: np.ndarray
    log_z_state: np.ndarray
    dY: np.ndarray | None
    d_log_z_action: np.ndarray | None
    d_log_z_state: np.ndarray | None


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1)
    with np.errstate(divide="ignore"):
        return m + np.log(np.sum(np.exp(x - m[:, None]), axis=1))


def _sweep(trans, mask, reward, mu, nu, horizon, lam=1.0, d_reward=None, d_mu=None) -> Iterator[_Step]:
    """Run the recursion from ``t = T-1`` down to 0, yielding each step.

    ``d_reward`` (S, A, d) and ``d_mu`` (S, d) switch on derivative
    propagation; both are derivatives w.r.t. the same stacked parameter vector.
    """
    S, A = mask.shape
    grad = d_reward is not None
    if np.any(~(mu > 0)):
        s = int(np.argmin(mu))
        raise NumericalError(f"mu must be positive, got mu[{s}] = {mu[s]}", (None, s, None))
    lz_next = np.zeros(S)
    dlz_next = np.zeros((S, d_reward.shape[2])) if grad else None
    with np.errstate(over="ignore"):
        base = lam * reward
    for t in range(horizon - 1, -1, -1):
        ln_g_next = nu + mu * lz_next
        Y = base + trans @ ln_g_next
        lza = (Y - nu[:, None]) / mu[:, None]
        lza = np.where(mask, lza, -np.inf)
        bad = mask & ~np.isfinite(lza)
        if bad.any():
            s, k = map(int, np.argwhere(bad)[0])
            raise NumericalError(f"non-finite lnZ[a|s] at t={t}, state={s}, slot={k}", (t, s, k))
        lzs = _logsumexp_rows(lza)
        dY = dlza = dlzs = None
        if grad:
            d_ln_g_next = d_mu * lz_next[:, None] + mu[:, None] * dlz_next
            dY = lam * d_reward + np.einsum("sak,kd->sad", trans, d_ln_g_next)
            dlza = dY / mu[:, None, None] - ((Y - nu[:, None]) / mu[:, None] ** 2)[:, :, None] * d_mu[:, None, :]
            dlza = np.where(mask[:, :, None], dlza, 0.0)
            pa = np.exp(lza - lzs[:, None])
            dlzs = np.einsum("sa,sad->sd", pa, dlza)
            dlz_next = dlzs
        yield _Step(t, lza, lzs, dY, dlza, dlzs)
        lz_next = lzs


def _policy_from_steps(mdp: TabularMdp, steps: Sequence[_Step]) -> Policy:
    T, (S, A) = mdp.horizon, mdp.dense.mask.shape
    lza = np.full((T, S, A), -np.inf)
    lzs = np.zeros((T + 1, S))
    for st in steps:
        lza[st.t] = st.log_z_action
        lzs[st.t] = st.log_z_state
    with np.errstate(invalid="ignore"):
        log_p = np.where(mdp.dense.mask[None], lza - lzs[:T, :, None], -np.inf)
    return Policy(mdp, log_p, lzs, lza)


def _mu_nu(mdp: TabularMdp, features: FeatureSet, gspec: GSpec):
    phi = features.state_matrix(mdp.n_states)
    return phi, gspec.mu_values(phi), gspec.nu_values(mdp.n_states)


def gmce_backward(mdp: TabularMdp, features: FeatureSet, reward_model: RewardModel, gspec: GSpec) -> Policy:
    """Generalized model policy for every (t, s)."""
    dense = mdp.dense
    _, mu, nu = _mu_nu(mdp, features, gspec)
    R = reward_model.table(mdp, features)
    steps = list(_sweep(dense.trans, dense.mask, R, mu, nu, mdp.horizon, reward_model.lam))
    return _policy_from_steps(mdp, steps)


def gmce_gradient_tables(mdp, features, reward_model, gspec) -> tuple[Policy, GradTables]:
    """Policy plus the full derivative tables (memory ``O(T S A d)``)."""
    dense = mdp.dense
    phi, mu, nu = _mu_nu(mdp, features, gspec)
    R = reward_model.table(mdp, features)
    d_reward, d_mu = _stacked_derivatives(features.reward_tensor(mdp), gspec.mu_jacobian(phi))
    steps = list(_sweep(dense.trans, dense.mask, R, mu, nu, mdp.horizon, reward_model.lam, d_reward, d_mu))
    T, (S, A), d = mdp.horizon, dense.mask.shape, d_reward.shape[2]
    U = np.zeros((T, S, A, d))
    Da = np.zeros((T, S, A, d))
    Ds = np.zeros((T + 1, S, d))
    for st in steps:
        U[st.t], Da[st.t], Ds[st.t] = st.dY, st.d_log_z_action, st.d_log_z_state
    return _policy_from_steps(mdp, steps), GradTables(U, Da, Ds)


def _stacked_derivatives(reward_tensor, mu_jac):
    S, A, d_r = reward_tensor.shape
    d_m = mu_jac.shape[1]
    d_reward = np.concatenate([reward_tensor, np.zeros((S, A, d_m))], axis=2)
    d_mu = np.concatenate([np.zeros((S, d_r)), mu_jac], axis=1)
    return d_reward, d_mu


def mce_backward(mdp: TabularMdp, features: FeatureSet, reward_model: RewardModel) -> Policy:
    """Classical soft value recursion, written independently of the generalized sweep."""
    S, T = mdp.n_states, mdp.horizon
    A = mdp.max_actions
    lam = reward_model.lam
    rewards = [[lam * reward_model.reward(features, s, a) for a in acts] for s, acts in enumerate(mdp.actions)]
    lza = np.full((T, S, A), -np.inf)
    lzs = np.zeros((T + 1, S))
    for t in range(T - 1, -1, -1):
        nxt = lzs[t + 1]
        for s, acts in enumerate(mdp.actions):
            for k, a in enumerate(acts):
                lza[t, s, k] = rewards[s][k] + sum(p * nxt[n] for n, p in mdp.successors(s, a))
            row = lza[t, s, : len(acts)]
            if not np.all(np.isfinite(row)):
                raise NumericalError(f"non-finite lnZ[a|s] at t={t}, state={s}", (t, s, None))
            top = row.max()
            lzs[t, s] = top + np.log(np.exp(row - top).sum())
    with np.errstate(invalid="ignore"):
        log_p = np.where(mdp.dense.mask[None], lza - lzs[:T, :, None], -np.inf)
    return Policy(mdp, log_p, lzs, lza)


def trajectory_log_prob(policy: Policy, traj: Trajectory, time_offset: int = 0) -> float:
    """Causally conditioned log-probability ``sum_t ln P(a_t | s_t)``."""
    if time_offset < 0 or time_offset + len(traj) > policy.horizon:
        raise ValueError(f"trajectory of length {len(traj)} at offset {time_offset} exceeds horizon {policy.horizon}")
    total = 0.0
    for i, (s, a) in enumerate(traj.steps):
        total += policy.log_prob(time_offset + i, s, a)
    return total


def step_counts(mdp: TabularMdp, trajectories: Sequence[Trajectory]) -> np.ndarray:
    """(T, S, A) occurrence counts of each (t, s, slot) in the trajectories."""
    counts = np.zeros((mdp.horizon, mdp.n_states, mdp.max_actions))
    slot = mdp.dense.slot
    for traj in trajectories:
        if len(traj) > mdp.horizon:
            raise ValueError(f"trajectory of length {len(traj)} exceeds horizon {mdp.horizon}")
        for t, (s, a) in enumerate(traj.steps):
            k = slot.get((s, a))
            if k is None:
                raise ValueError(f"step {t}: action {a} infeasible at state {s}")
            counts[t, s, k] += 1
    return counts


class LikelihoodProblem:
    """Log-likelihood of a fixed set of trajectories as a function of ``[theta_r; theta_mu]``.

    Dense arrays are built once so repeated evaluations (training, finite
    differences) only pay for the recursion.
    """

    def __init__(self, mdp, features, trajectories, gspec: GSpec, lam: float = 1.0):
        if isinstance(trajectories, Dataset):
            trajectories = trajectories.train
        self.mdp = mdp
        self.gspec = gspec
        self.lam = float(lam)
        dense = mdp.dense
        self.trans, self.mask = dense.trans, dense.mask
        self.reward_tensor = features.reward_tensor(mdp)
        self.phi = features.state_matrix(mdp.n_states)
        self.nu = gspec.nu_values(mdp.n_states)
        self.counts = step_counts(mdp, trajectories)
        self.d_r = self.reward_tensor.shape[2]
        self.d_mu = self.phi.shape[1]
        if gspec.dim != self.d_mu:
            raise ValueError(f"theta_mu has dimension {gspec.dim}, state features {self.d_mu}")
        self._observed = self.counts > 0

    @property
    def n_params(self) -> int:
        return self.d_r + self.d_mu

    def split(self, params):
        params = np.asarray(params, dtype=float)
        return params[: self.d_r], params[self.d_r :]

    def pack(self, theta_r, theta_mu) -> np.ndarray:
        return np.concatenate([np.asarray(theta_r, float), np.asarray(theta_mu, float)])

    def _arrays(self, params):
        theta_r, theta_mu = self.split(params)
        g = self.gspec.replace_theta(theta_mu)
        return self.reward_tensor @ theta_r, g.mu_values(self.phi), g

    def _step_ll(self, st: _Step) -> float:
        c = self.counts[st.t]
        obs = self._observed[st.t]
        if not obs.any():
            return 0.0
        lp = st.log_z_action - st.log_z_state[:, None]
        return float(np.sum(c[obs] * lp[obs]))

    def value(self, params) -> float:
        R, mu, _ = self._arrays(params)
        return sum(self._step_ll(st) for st in _sweep(self.trans, self.mask, R, mu, self.nu, self.mdp.horizon, self.lam))

    def value_and_grad(self, params) -> tuple[float, np.ndarray]:
        R, mu, g = self._arrays(params)
        d_reward, d_mu = _stacked_derivatives(self.reward_tensor, g.mu_jacobian(self.phi))
        ll = 0.0
        grad = np.zeros(self.n_params)
        for st in _sweep(self.trans, self.mask, R, mu, self.nu, self.mdp.horizon, self.lam, d_reward, d_mu):
            ll += self._step_ll(st)
            c = self.counts[st.t]
            if self._observed[st.t].any():
                d_log_p = st.d_log_z_action - st.d_log_z_state[:, None, :]
                grad += np.einsum("sa,sad->d", c, d_log_p)
        return ll, grad

    def policy(self, params) -> Policy:
        R, mu, _ = self._arrays(params)
        steps = list(_sweep(self.trans, self.mask, R, mu, self.nu, self.mdp.horizon, self.lam))
        return _policy_from_steps(self.mdp, steps)


def log_likelihood_grad(mdp, features, reward_model: RewardModel, gspec: GSpec, dataset) -> tuple[float, np.ndarray]:
    """Log-likelihood of the trajectories and its gradient over ``[theta_r; theta_mu]``.

    ``dataset`` is a :class:`Dataset` (its training split is used) or a
    sequence of trajectories, each evaluated from time 0.
    """
    problem = LikelihoodProblem(mdp, features, dataset, gspec, reward_model.lam)
    return problem.value_and_grad(problem.pack(reward_model.theta_r, gspec.theta_mu))


class EnumeratedPath(NamedTuple):
    states: tuple[int, ...]
    actions: tuple[int, ...]
    reward: float

    @property
    def steps(self) -> tuple[tuple[int, int], ...]:
        return tuple(zip(self.states, self.actions))


def enumerate_paths(mdp: TabularMdp, origin: int, dest: int, max_len: int, rewards=None, max_paths: int = 10**6):
    """All action sequences leading deterministically from ``origin`` to ``dest``.

    A path stops at its first arrival at ``dest``. ``rewards`` is an optional
    callable ``(s, a) -> float`` summed along each path. Only for use as a
    test oracle on small instances.
    """
    if not mdp.is_deterministic():
        raise ValueError("enumerate_paths requires deterministic transitions")
    out: list[EnumeratedPath] = []

    def walk(states, actions, total):
        s = states[-1]
        if s == dest:
            out.append(EnumeratedPath(tuple(states), tuple(actions), total))
            if len(out) > max_paths:
                raise OverflowError(f"more than {max_paths} paths")
            return
        if len(actions) >= max_len:
            return
        for a in mdp.actions[s]:
            for nxt, p in mdp.successors(s, a):
                if p == 1.0:
                    r = rewards(s, a) if rewards is not None else 0.0
                    walk(states + [nxt], actions + [a], total + r)

    walk([origin], [], 0.0)
    return out


@dataclass
class GameCheckReport:
    """Outcome of the grid search for the minimizer of the generalized log-loss."""

    grid_step: float
    entries: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e["passed"] for e in self.entries)

    def to_dict(self) -> dict:
        return {"grid_step": self.grid_step, "passed": self.passed, "entries": self.entries}


def _simplex_grid(n_actions: int, n: int) -> np.ndarray:
    rows = [c for c in itertools.product(range(n + 1), repeat=n_actions - 1) if sum(c) <= n]
    k = np.array(rows, dtype=float).reshape(len(rows), n_actions - 1)
    return np.column_stack([k, n - k.sum(axis=1)]) / n


def game_value_check(mdp, features, reward_model, gspec, grid_step: float = 0.01, start=None) -> GameCheckReport:
    """Grid-search the predictor ``Q`` minimizing ``E^P[-sum_t ln G(Q(a_t|s_t)|s_t)]``.

    ``P`` is the generalized-model policy. The expected loss is a sum over
    (t, s) of visitation-weighted terms that each depend on one conditional
    ``Q(.|s_t)``, so the joint grid search factorizes into a search per
    (t, s). Each block passes when no grid point beats ``Q = P`` and the grid
    argmin lies within ``grid_step`` (max-norm) of the closest grid point with
    finite loss, i.e. one that keeps mass on every action ``P`` supports.
    """
    if mdp.n_states > 3 or mdp.max_actions > 3 or mdp.horizon > 2:
        raise ValueError("game_value_check only handles <=3 states, <=3 actions, horizon <=2")
    if not 0 < grid_step <= 0.1:
        raise ValueError("grid_step must be in (0, 0.1]")
    n = int(round(1.0 / grid_step))
    if abs(n * grid_step - 1.0) > 1e-9:
        raise ValueError("grid_step must divide 1")
    policy = gmce_backward(mdp, features, reward_model, gspec)
    phi = features.state_matrix(mdp.n_states)
    mu, nu = gspec.mu_values(phi), gspec.nu_values(mdp.n_states)
    dense = mdp.dense
    d = np.full(mdp.n_states, 1.0 / mdp.n_states) if start is None else np.asarray(start, float)
    report = GameCheckReport(grid_step)
    grids = {}
    for t in range(mdp.horizon):
        p_t = np.exp(policy.log_p[t])
        for s, acts in enumerate(mdp.actions):
            na = len(acts)
            P = p_t[s, :na]
            if na not in grids:
                grids[na] = _simplex_grid(na, n)
            Q = grids[na]
            with np.errstate(divide="ignore", invalid="ignore"):
                logq = np.log(Q)
                loss = -(nu[s] + mu[s] * np.where(P > 0, logq, 0.0)) @ P
            best = int(np.argmin(loss))
            loss_at_p = float(-(nu[s] + mu[s] * np.log(P)) @ P)
            gaps = np.max(np.abs(Q - P), axis=1)
            dist = float(gaps[best])
            # near a face of the simplex every closer grid point puts zero mass
            # on a supported action, so nearness is measured among finite-loss points
            nearest = float(np.min(gaps[np.isfinite(loss)]))
            ok = dist <= nearest + grid_step + 1e-12 and loss_at_p <= float(loss[best]) + 1e-12
            report.entries.append(
                {
                    "t": t,
                    "state": s,
                    "weight": float(d[s]),
                    "P": P.tolist(),
                    "Q_argmin": Q[best].tolist(),
                    "distance": dist,
                    "nearest_feasible": nearest,
                    "loss_at_P": loss_at_p,
                    "loss_at_argmin": float(loss[best]),
                    "passed": bool(ok),
                }
            )
        d = np.einsum("s,sa,sak->k", d, p_t, dense.trans)
    return report
