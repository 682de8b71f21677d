"""Maximum-likelihood fitting of reward and G-function parameters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .gfunc import GSpec, identity_theta
from .mdp import Dataset, FeatureSet, TabularMdp
from .solver import LikelihoodProblem, NumericalError, Policy, RewardModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 500
    grad_tol: float = 1e-5
    step_rule: str = "backtracking"
    direction: str = "gradient"
    init_step: float = 1.0
    shrink: float = 0.5
    sufficient_increase: float = 1e-4
    max_shrinks: int = 60
    l2_reg: tuple[float, float] = (0.0, 0.0)
    freeze_mu: bool = False
    seed: int = 0
    init_noise: float = 0.0
    lbfgs_memory: int = 10
    mce_warmup: bool = True

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not (self.grad_tol > 0 and self.init_step > 0 and 0 < self.shrink < 1 and self.sufficient_increase > 0):
            raise ValueError("tolerances and step parameters must be positive, shrink in (0, 1)")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.direction not in ("gradient", "lbfgs"):
            raise ValueError(f"unknown direction {self.direction!r}")
        reg = self.l2_reg
        if np.isscalar(reg):
            object.__setattr__(self, "l2_reg", (float(reg), float(reg)))
        if min(self.l2_reg) < 0:
            raise ValueError("l2_reg must be nonnegative")


@dataclass
class FittedModel:
    theta_r: np.ndarray
    gspec: GSpec
    lam: float = 1.0
    ll_trace: list[float] = field(default_factory=list)
    converged: bool = False
    iterations_used: int = 0
    kind: str = "gmce"
    message: str = ""

    @property
    def theta_mu(self) -> np.ndarray:
        return self.gspec.theta_mu

    @property
    def reward_model(self) -> RewardModel:
        return RewardModel(self.theta_r, self.lam)

    def policy(self, mdp: TabularMdp, features: FeatureSet) -> Policy:
        from .solver import gmce_backward

        return gmce_backward(mdp, features, self.reward_model, self.gspec)

    def to_dict(self) -> dict:
        return {
            "model": self.kind,
            "theta_r": [float(x) for x in self.theta_r],
            "theta_mu": [float(x) for x in self.gspec.theta_mu],
            "gspec": self.gspec.to_dict(),
            "lambda": self.lam,
            "ll_trace": [float(x) for x in self.ll_trace],
            "converged": bool(self.converged),
            "iterations_used": int(self.iterations_used),
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FittedModel":
        gspec = GSpec.from_dict(data["gspec"])
        if "theta_mu" in data:
            gspec = gspec.replace_theta(data["theta_mu"])
        return cls(
            theta_r=np.asarray(data["theta_r"], dtype=float),
            gspec=gspec,
            lam=float(data.get("lambda", 1.0)),
            ll_trace=list(data.get("ll_trace", [])),
            converged=bool(data.get("converged", False)),
            iterations_used=int(data.get("iterations_used", 0)),
            kind=data.get("model", "gmce"),
            message=data.get("message", ""),
        )


def initial_parameters(features: FeatureSet, n_states: int, gspec_template: GSpec, config: FitConfig):
    """``theta_r = 0`` and ``theta_mu`` putting every ``mu(s)`` at 1, plus optional seeded noise."""
    d_r = features.d_reward
    theta_r = np.zeros(d_r)
    theta_mu = identity_theta(features.state_matrix(n_states), gspec_template.link)
    if config.init_noise > 0:
        rng = np.random.default_rng(config.seed)
        theta_r = theta_r + config.init_noise * rng.normal(size=d_r)
        if not config.freeze_mu:
            theta_mu = theta_mu + config.init_noise * rng.normal(size=theta_mu.shape)
    return theta_r, theta_mu


class _Lbfgs:
    def __init__(self, memory):
        self.memory = memory
        self.pairs = []

    def update(self, s, y):
        # ascent on f == descent on -f; curvature pair for -f is (s, -y)
        y = -y
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            self.pairs.append((s, y))
            self.pairs = self.pairs[-self.memory :]

    def direction(self, g):
        q = -g
        alphas = []
        for s, y in reversed(self.pairs):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q = q - a * y
        if self.pairs:
            s, y = self.pairs[-1]
            q = q * (s @ y) / (y @ y)
        for (s, y), a in zip(self.pairs, reversed(alphas)):
            b = (y @ q) / (y @ s)
            q = q + (a - b) * s
        return -q


def fit(
    mdp: TabularMdp,
    features: FeatureSet,
    dataset,
    gspec_template: GSpec,
    config: FitConfig = FitConfig(),
    lam: float = 1.0,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> FittedModel:
    """Maximize the (optionally L2-penalized) training log-likelihood.

    Starts from the classical model (``theta_r = 0``, ``mu = 1``) unless
    ``init = (theta_r, theta_mu)`` is given. With ``config.freeze_mu`` only
    ``theta_r`` moves. ``theta_mu`` is penalized towards its starting value,
    ``theta_r`` towards zero.

    With ``config.mce_warmup`` (the default) a joint fit from the default
    start first runs up to ``max_iters`` steps with ``mu`` held at 1, then up
    to ``max_iters`` joint steps from there. The two stages share one
    objective, so the concatenated trace stays monotone.
    """
    if config.mce_warmup and not config.freeze_mu and init is None and config.max_iters > 0:
        return _staged_fit(mdp, features, dataset, gspec_template, config, lam)
    problem = LikelihoodProblem(mdp, features, dataset, gspec_template, lam)
    if init is None:
        theta_r0, theta_mu0 = initial_parameters(features, mdp.n_states, gspec_template, config)
        if config.freeze_mu and gspec_template.theta_mu.size == problem.d_mu and np.any(gspec_template.theta_mu):
            theta_mu0 = gspec_template.theta_mu.copy()
    else:
        theta_r0, theta_mu0 = (np.asarray(v, dtype=float).copy() for v in init)
    x = problem.pack(theta_r0, theta_mu0)
    anchor = x.copy()
    anchor[: problem.d_r] = 0.0
    free = np.ones(problem.n_params, dtype=bool)
    if config.freeze_mu:
        free[problem.d_r :] = False
    reg = np.concatenate([np.full(problem.d_r, config.l2_reg[0]), np.full(problem.d_mu, config.l2_reg[1])])

    def objective(params, with_grad=True):
        if with_grad:
            ll, g = problem.value_and_grad(params)
        else:
            ll, g = problem.value(params), None
        diff = params - anchor
        pen = 0.5 * float(np.sum(reg * diff * diff))
        if g is not None:
            g = np.where(free, g - reg * diff, 0.0)
        return ll - pen, ll, g

    def model(params, trace, converged, iters, message):
        theta_r, theta_mu = problem.split(params)
        return FittedModel(
            theta_r.copy(),
            gspec_template.replace_theta(theta_mu.copy()),
            float(lam),
            trace,
            converged,
            iters,
            "mce" if config.freeze_mu else "gmce",
            message,
        )

    try:
        f, ll, g = objective(x)
    except NumericalError as exc:
        raise NumericalError(f"non-finite log-likelihood at initialization (theta={x.tolist()}): {exc}") from exc
    if not np.isfinite(f):
        raise NumericalError(f"non-finite log-likelihood at initialization (theta={x.tolist()})")
    trace = [f]
    step = config.init_step
    lbfgs = _Lbfgs(config.lbfgs_memory) if config.direction == "lbfgs" else None
    for it in range(config.max_iters):
        if np.max(np.abs(g)) <= config.grad_tol:
            return model(x, trace, True, it, "gradient tolerance reached")
        d = lbfgs.direction(g) if lbfgs is not None else g
        d = np.where(free, d, 0.0)
        slope = float(g @ d)
        if slope <= 0:
            d, slope = g, float(g @ g)
            if lbfgs is not None:
                lbfgs.pairs.clear()
        if config.step_rule == "fixed":
            x_new = x + config.init_step * d
            f_new, ll_new, g_new = objective(x_new)
        else:
            alpha = min(step * 2.0, 1.0) if lbfgs is not None else step * 2.0
            if it == 0:
                alpha = config.init_step
            for _ in range(config.max_shrinks + 1):
                x_new = x + alpha * d
                try:
                    f_new, ll_new, _ = objective(x_new, with_grad=False)
                except NumericalError:
                    f_new = -np.inf
                if np.isfinite(f_new) and f_new >= f + config.sufficient_increase * alpha * slope:
                    break
                alpha *= config.shrink
            else:
                return model(x, trace, False, it, "line search failed")
            step = alpha
            f_new, ll_new, g_new = objective(x_new)
        if lbfgs is not None:
            lbfgs.update(x_new - x, g_new - g)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        log.debug("iter %d: objective %.6f step %.3g", it + 1, f, step)
    converged = config.max_iters > 0 and np.max(np.abs(g)) <= config.grad_tol
    return model(x, trace, bool(converged), config.max_iters, "iteration limit" if not converged else "gradient tolerance reached")


def _staged_fit(mdp, features, dataset, gspec_template, config, lam):
    theta_r0, theta_mu0 = initial_parameters(features, mdp.n_states, gspec_template, config)
    first = fit(mdp, features, dataset, gspec_template, replace(config, freeze_mu=True), lam, init=(theta_r0, theta_mu0))
    second = fit(mdp, features, dataset, gspec_template, replace(config, mce_warmup=False), lam, init=(first.theta_r, first.theta_mu))
    log.debug("warm-up: %d iterations, objective %.6f", first.iterations_used, first.ll_trace[-1])
    second.ll_trace = first.ll_trace + second.ll_trace[1:]
    second.iterations_used += first.iterations_used
    return second


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    d_reward: int
    step: float

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric)

    @property
    def rel_error(self) -> np.ndarray:
        """|analytic - numeric| / max(1, |analytic|, |numeric|) per coordinate."""
        scale = np.maximum(1.0, np.maximum(np.abs(self.analytic), np.abs(self.numeric)))
        return self.abs_error / scale

    def block(self, name: str) -> dict:
        sl = slice(0, self.d_reward) if name == "theta_r" else slice(self.d_reward, None)
        a, r = self.abs_error[sl], self.rel_error[sl]
        return {"max_abs": float(a.max(initial=0.0)), "max_rel": float(r.max(initial=0.0))}

    @property
    def max_rel(self) -> float:
        return float(self.rel_error.max(initial=0.0))

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "theta_r": self.block("theta_r"),
            "theta_mu": self.block("theta_mu"),
            "analytic": self.analytic.tolist(),
            "numeric": self.numeric.tolist(),
        }


def finite_diff_check(mdp, features, dataset, params, step: float = 1e-6, lam: float = 1.0) -> GradCheckReport:
    """Central differences of the log-likelihood against the analytic gradient.

    ``params`` is a :class:`FittedModel` or a ``(RewardModel, GSpec)`` pair.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if isinstance(params, FittedModel):
        reward_model, gspec = params.reward_model, params.gspec
    else:
        reward_model, gspec = params
    lam = reward_model.lam
    problem = LikelihoodProblem(mdp, features, dataset, gspec, lam)
    x = problem.pack(reward_model.theta_r, gspec.theta_mu)
    _, analytic = problem.value_and_grad(x)
    numeric = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        numeric[i] = (problem.value(x + e) - problem.value(x - e)) / (2 * step)
    return GradCheckReport(analytic, numeric, problem.d_r, step)
