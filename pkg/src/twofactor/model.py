"""Closed-form moments and state-space matrices of the two-factor model.

The log spot price is ``chi + xi``: ``chi`` is a zero-mean O-U deviation
with speed ``kappa``; ``xi`` is an O-U equilibrium level with speed
``gamma`` and drift ``mu_xi``. All rates are per year.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "ParameterError",
    "ParamVector",
    "StateVec",
    "TransitionSystem",
    "MeasurementSystem",
    "validate_params",
    "state_mean",
    "state_cov",
    "log_spot_variance",
    "a_function",
    "log_expected_spot",
    "transition_system",
    "measurement_system",
    "stationary_moments",
    "swap_labels",
    "TRUE_THETA",
]


class ParameterError(ValueError):
    """A parameter vector violates the model's domain constraints."""


@dataclass(frozen=True)
class ParamVector:
    kappa: float
    gamma: float
    mu_xi: float
    sigma_chi: float
    sigma_xi: float
    rho: float
    lambda_chi: float = 0.0
    lambda_xi: float = 0.0
    # Measurement-noise standard deviations. A single entry is shared by
    # every contract (the tied configuration).
    s: tuple[float, ...] = (0.03,)

    def __post_init__(self):
        object.__setattr__(self, "s", tuple(float(v) for v in np.atleast_1d(self.s)))

    def noise_sd(self, n: int) -> np.ndarray:
        """Per-contract noise sd, broadcasting a tied ``s`` to ``n`` contracts."""
        if len(self.s) == 1:
            return np.full(n, self.s[0])
        if len(self.s) != n:
            raise ParameterError(
                f"s has {len(self.s)} entries but there are {n} contracts"
            )
        return np.asarray(self.s, dtype=float)

    def replace(self, **changes) -> "ParamVector":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "gamma": self.gamma,
            "mu_xi": self.mu_xi,
            "sigma_chi": self.sigma_chi,
            "sigma_xi": self.sigma_xi,
            "rho": self.rho,
            "lambda_chi": self.lambda_chi,
            "lambda_xi": self.lambda_xi,
            "s": list(self.s),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParamVector":
        known = {
            "kappa", "gamma", "mu_xi", "sigma_chi", "sigma_xi", "rho",
            "lambda_chi", "lambda_xi", "s",
        }
        extra = set(data) - known
        if extra:
            raise ParameterError(f"unknown parameter(s): {', '.join(sorted(extra))}")
        missing = {"kappa", "gamma", "mu_xi", "sigma_chi", "sigma_xi", "rho"} - set(data)
        if missing:
            raise ParameterError(f"missing parameter(s): {', '.join(sorted(missing))}")
        kwargs = {k: (float(v) if k != "s" else v) for k, v in data.items()}
        return cls(**kwargs)


TRUE_THETA = ParamVector(
    kappa=1.5, gamma=1.0, mu_xi=-2.0, sigma_chi=1.3, sigma_xi=0.3, rho=-0.7, s=(0.03,)
)


@dataclass(frozen=True)
class StateVec:
    chi: float
    xi: float

    def __post_init__(self):
        if not (math.isfinite(self.chi) and math.isfinite(self.xi)):
            raise ValueError(f"state must be finite, got ({self.chi}, {self.xi})")

    def as_array(self) -> np.ndarray:
        return np.array([self.chi, self.xi])


@dataclass(frozen=True, eq=False)
class TransitionSystem:
    c: np.ndarray
    G: np.ndarray
    W: np.ndarray
    dt: float


@dataclass(frozen=True, eq=False)
class MeasurementSystem:
    d: np.ndarray
    F: np.ndarray  # shape (2, n); column i holds the loadings of contract i
    V: np.ndarray
    maturities: np.ndarray = field(repr=False)


def validate_params(raw: ParamVector) -> ParamVector:
    """Return ``raw`` unchanged if it satisfies every domain constraint.

    Raises :class:`ParameterError` naming the first violated constraint.
    The identification constraint ``kappa >= gamma`` is not checked here;
    estimation enforces it.
    """
    for name in ("kappa", "gamma", "sigma_chi", "sigma_xi"):
        value = getattr(raw, name)
        if not value > 0 or not math.isfinite(value):
            raise ParameterError(f"{name} must be positive")
    for name in ("mu_xi", "lambda_chi", "lambda_xi"):
        if not math.isfinite(getattr(raw, name)):
            raise ParameterError(f"{name} must be finite")
    if not -1.0 < raw.rho < 1.0:
        raise ParameterError("rho out of range (-1, 1)")
    if len(raw.s) == 0:
        raise ParameterError("s must have at least one entry")
    for i, s in enumerate(raw.s):
        if not s > 0 or not math.isfinite(s):
            raise ParameterError(f"s[{i}] must be positive")
    return raw


def _one_minus_exp(rate: float, t):
    # (1 - e^{-rate t}) / rate, accurate for small rate * t
    return -np.expm1(-rate * np.asarray(t, dtype=float)) / rate


def state_mean(
    theta: ParamVector, x0: StateVec, t: float, risk_neutral: bool = False
) -> np.ndarray:
    """Mean of ``(chi_t, xi_t)`` given ``x0``, under either measure."""
    if t < 0:
        raise ValueError("t must be non-negative")
    ek = math.exp(-theta.kappa * t)
    eg = math.exp(-theta.gamma * t)
    mu = theta.mu_xi
    chi = ek * x0.chi
    if risk_neutral:
        mu = mu - theta.lambda_xi
        chi -= theta.lambda_chi * _one_minus_exp(theta.kappa, t)
    xi = mu * _one_minus_exp(theta.gamma, t) + eg * x0.xi
    return np.array([chi, xi])


def state_cov(theta: ParamVector, t: float) -> np.ndarray:
    """Covariance of ``(chi_t, xi_t)`` given a fixed start; same under both measures."""
    if t < 0:
        raise ValueError("t must be non-negative")
    k, g = theta.kappa, theta.gamma
    v_chi = theta.sigma_chi**2 * _one_minus_exp(2 * k, t)
    v_xi = theta.sigma_xi**2 * _one_minus_exp(2 * g, t)
    c = theta.sigma_chi * theta.sigma_xi * theta.rho * _one_minus_exp(k + g, t)
    return np.array([[v_chi, c], [c, v_xi]])


def log_spot_variance(theta: ParamVector, t):
    """Variance of ``chi_t + xi_t``; vectorised over ``t``."""
    k, g = theta.kappa, theta.gamma
    return (
        theta.sigma_chi**2 * _one_minus_exp(2 * k, t)
        + theta.sigma_xi**2 * _one_minus_exp(2 * g, t)
        + 2 * theta.sigma_chi * theta.sigma_xi * theta.rho * _one_minus_exp(k + g, t)
    )


def a_function(theta: ParamVector, tau):
    """Deterministic part of the log futures price at time-to-maturity ``tau``.

    Accepts a scalar or an array of maturities.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    out = (
        -theta.lambda_chi * _one_minus_exp(theta.kappa, tau)
        + (theta.mu_xi - theta.lambda_xi) * _one_minus_exp(theta.gamma, tau)
        + 0.5 * log_spot_variance(theta, tau)
    )
    return float(out) if out.ndim == 0 else out


def log_expected_spot(
    theta: ParamVector, x0: StateVec, t: float, risk_neutral: bool = False
) -> float:
    """``log E[S_t]``; under the risk-neutral measure this is ``log F_{0,t}``."""
    m = state_mean(theta, x0, t, risk_neutral=risk_neutral)
    return float(m[0] + m[1] + 0.5 * log_spot_variance(theta, t))


def transition_system(theta: ParamVector, dt: float) -> TransitionSystem:
    if not dt > 0:
        raise ValueError("dt must be positive")
    c = np.array([0.0, theta.mu_xi * _one_minus_exp(theta.gamma, dt)])
    G = np.diag([math.exp(-theta.kappa * dt), math.exp(-theta.gamma * dt)])
    return TransitionSystem(c=c, G=G, W=state_cov(theta, dt), dt=float(dt))


def measurement_system(theta: ParamVector, maturities: Sequence[float]) -> MeasurementSystem:
    """Observation equation for contracts with the given times-to-maturity.

    Both the intercept and the loadings are evaluated at time-to-maturity.
    """
    tau = np.asarray(maturities, dtype=float).reshape(-1)
    if np.any(tau < 0) or not np.all(np.isfinite(tau)):
        raise ValueError("maturities must be finite and non-negative")
    d = np.atleast_1d(a_function(theta, tau))
    F = np.vstack([np.exp(-theta.kappa * tau), np.exp(-theta.gamma * tau)])
    V = np.diag(theta.noise_sd(tau.size) ** 2)
    return MeasurementSystem(d=d, F=F, V=V, maturities=tau)


def stationary_moments(theta: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    """Stationary mean and covariance used to start the filter."""
    k, g = theta.kappa, theta.gamma
    a0 = np.array([0.0, theta.mu_xi / g])
    c = theta.sigma_chi * theta.sigma_xi * theta.rho / (k + g)
    P0 = np.array([[theta.sigma_chi**2 / (2 * k), c], [c, theta.sigma_xi**2 / (2 * g)]])
    return a0, P0


def swap_labels(theta: ParamVector) -> ParamVector:
    """Observationally equivalent parameters with the two factors exchanged.

    The old equilibrium factor, recentred to zero mean, becomes the new
    short factor; the old short factor, shifted by ``mu_xi / gamma``, becomes
    the new equilibrium factor. The long-run level ``mu_xi / gamma`` is
    preserved, so the drift rescales to ``kappa * mu_xi / gamma``.
    """
    return theta.replace(
        kappa=theta.gamma,
        gamma=theta.kappa,
        mu_xi=theta.kappa * theta.mu_xi / theta.gamma,
        sigma_chi=theta.sigma_xi,
        sigma_xi=theta.sigma_chi,
        lambda_chi=theta.lambda_xi,
        lambda_xi=theta.lambda_chi,
    )
