"""The generalized entropy function ``G(p|s) = exp(nu(s)) * p**mu(s)``.

``mu(s)`` is parameterized from state features, either linearly
(``mu = max(theta . phi, floor)``) or through a log link
(``mu = exp(theta . phi)``). ``nu`` is a fixed per-state offset. With
``mu == 1`` and ``nu == 0`` the function is the identity and the model
reduces to classical maximum causal entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

LINKS = ("linear", "log")


@dataclass(frozen=True, eq=False)
class GSpec:
    theta_mu: np.ndarray
    link: str = "linear"
    mu_floor: float = 1e-6
    nu_default: float = 0.0
    nu: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "theta_mu", np.asarray(self.theta_mu, dtype=float).reshape(-1))
        if self.link == "log-link":
            object.__setattr__(self, "link", "log")
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if not self.mu_floor > 0:
            raise ValueError("mu_floor must be positive")

    def replace_theta(self, theta_mu) -> "GSpec":
        return GSpec(theta_mu, self.link, self.mu_floor, self.nu_default, dict(self.nu))

    @property
    def dim(self) -> int:
        return self.theta_mu.shape[0]

    def _linear(self, state_features):
        phi = np.asarray(state_features, dtype=float)
        if phi.shape[-1] != self.dim:
            raise ValueError(f"state feature dimension {phi.shape[-1]} != theta_mu dimension {self.dim}")
        return phi @ self.theta_mu

    def mu_values(self, state_features) -> np.ndarray:
        """mu for one feature vector or a (S, d_mu) matrix of them."""
        z = self._linear(state_features)
        if self.link == "log":
            return np.exp(z)
        return np.maximum(z, self.mu_floor)

    def mu_jacobian(self, state_features) -> np.ndarray:
        """d mu / d theta_mu, same leading shape as ``state_features``."""
        phi = np.asarray(state_features, dtype=float)
        z = self._linear(phi)
        if self.link == "log":
            return np.exp(z)[..., None] * phi
        return np.where((z > self.mu_floor)[..., None], phi, 0.0)

    def nu_values(self, n_states: int) -> np.ndarray:
        out = np.full(n_states, float(self.nu_default))
        for s, v in self.nu.items():
            out[int(s)] = v
        return out

    def nu_of(self, s: int) -> float:
        return float(self.nu.get(s, self.nu_default))

    def to_dict(self) -> dict:
        out = {
            "link": self.link,
            "theta_mu": [float(x) for x in self.theta_mu],
            "nu_default": float(self.nu_default),
            "mu_floor": float(self.mu_floor),
        }
        if self.nu:
            out["nu"] = {str(k): float(v) for k, v in self.nu.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GSpec":
        return cls(
            np.asarray(data["theta_mu"], dtype=float),
            link=data.get("link", "linear"),
            mu_floor=float(data.get("mu_floor", 1e-6)),
            nu_default=float(data.get("nu_default", 0.0)),
            nu={int(k): float(v) for k, v in data.get("nu", {}).items()},
        )


def identity_theta(state_features, link: str = "linear") -> np.ndarray:
    """theta_mu making mu(s) = 1 for every row of ``state_features`` (least squares).

    For the log link this is the minimum-norm solution of ``Phi theta = 0``,
    i.e. zero.
    """
    phi = np.asarray(state_features, dtype=float)
    if link in ("log", "log-link"):
        return np.zeros(phi.shape[1])
    theta, *_ = np.linalg.lstsq(phi, np.ones(phi.shape[0]), rcond=None)
    return theta


def _positive(x, name):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError(f"{name} must be positive")
    return x


def _state_terms(gspec: GSpec, s: int, state_features):
    phi = np.asarray(state_features, dtype=float)
    row = phi[s] if phi.ndim == 2 else phi
    return float(gspec.mu_values(row)), gspec.nu_of(s), row


def mu(gspec: GSpec, state_features) -> float:
    return float(gspec.mu_values(state_features))


def g_log(gspec: GSpec, p, s: int, state_features):
    """ln G(p|s) = nu(s) + mu(s) ln p."""
    m, n, _ = _state_terms(gspec, s, state_features)
    return n + m * np.log(_positive(p, "p"))


def g_eval(gspec: GSpec, p, s: int, state_features):
    m, n, _ = _state_terms(gspec, s, state_features)
    return np.exp(n) * _positive(p, "p") ** m


def g_inverse(gspec: GSpec, h, s: int, state_features):
    m, n, _ = _state_terms(gspec, s, state_features)
    return np.exp((np.log(_positive(h, "h")) - n) / m)


def g_grads(gspec: GSpec, p, s: int, state_features):
    """Gradients w.r.t. theta_mu of ``ln G(p|s)`` and of ``ln G^{-1}(p|s)``.

    The second is the derivative of the exponent ``(ln p - nu(s)) / mu(s)``
    that the inverse applies, with ``p`` playing the role of ``h``.
    """
    m, n, row = _state_terms(gspec, s, state_features)
    dmu = gspec.mu_jacobian(row)
    lp = float(np.log(_positive(p, "p")))
    return lp * dmu, -(lp - n) / m**2 * dmu
