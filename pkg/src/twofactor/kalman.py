"""Kalman filter and prediction-error likelihood for observation panels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy.stats import norm

from . import _kernels
from .model import (
    MeasurementSystem,
    ParameterError,
    ParamVector,
    TransitionSystem,
    a_function,
    measurement_system,
    stationary_moments,
    transition_system,
    validate_params,
)
from .simulate import ObservationPanel

__all__ = [
    "NumericalError",
    "FilterState",
    "StepResult",
    "FilterOutput",
    "Band",
    "ConfidenceBands",
    "kf_step",
    "kf_run",
    "neg_log_likelihood",
    "state_confidence_band",
]

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """The filter hit a non-positive-definite innovation covariance."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True, eq=False)
class FilterState:
    a: np.ndarray
    P: np.ndarray


class StepResult(NamedTuple):
    state: FilterState
    e: np.ndarray
    L: np.ndarray
    loglik: float
    predicted: FilterState


def kf_step(
    prior: FilterState,
    trans: TransitionSystem,
    meas: MeasurementSystem,
    y: np.ndarray,
    joseph: bool = True,
) -> StepResult:
    """One predict/update cycle.

    ``loglik`` is ``-log det L - e' L^-1 e`` (no ``2 pi`` term, no factor
    one half). NaN entries of ``y`` are treated as missing quotes and their
    rows are dropped from the measurement equation. Set ``joseph=False`` for
    the plain ``P - K F' P`` covariance update.
    """
    a_pred = trans.c + trans.G @ prior.a
    P_pred = trans.G @ prior.P @ trans.G.T + trans.W
    P_pred = 0.5 * (P_pred + P_pred.T)
    predicted = FilterState(a_pred, P_pred)

    y = np.asarray(y, dtype=float)
    obs = ~np.isnan(y)
    n = y.size
    e_full = np.full(n, np.nan)
    L_full = np.full((n, n), np.nan)
    if not obs.any():
        return StepResult(predicted, e_full, L_full, 0.0, predicted)

    F = meas.F[:, obs]
    V = meas.V[np.ix_(obs, obs)]
    e = y[obs] - (meas.d[obs] + F.T @ a_pred)
    PF = P_pred @ F
    L = F.T @ PF + V
    L = 0.5 * (L + L.T)
    try:
        chol = linalg.cho_factor(L, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite") from exc
    K = linalg.cho_solve(chol, PF.T).T
    a = a_pred + K @ e
    if joseph:
        B = np.eye(2) - K @ F.T
        P = B @ P_pred @ B.T + K @ V @ K.T
    else:
        P = P_pred - K @ F.T @ P_pred
    P = 0.5 * (P + P.T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    quad = float(e @ linalg.cho_solve(chol, e))

    e_full[obs] = e
    L_full[np.ix_(obs, obs)] = L
    return StepResult(FilterState(a, P), e_full, L_full, -logdet - quad, predicted)


@dataclass(frozen=True, eq=False)
class FilterOutput:
    times: np.ndarray
    a_pred: np.ndarray  # (T, 2)
    P_pred: np.ndarray  # (T, 2, 2)
    a: np.ndarray  # (T, 2)
    P: np.ndarray  # (T, 2, 2)
    e: np.ndarray  # (T, n), NaN where missing
    L: np.ndarray  # (T, n, n)
    loglik_terms: np.ndarray  # (T,) per-step -log det L - e' L^-1 e
    n_observed: int

    @property
    def total(self) -> float:
        """Sum of the per-step terms (no ``2 pi`` constant)."""
        return float(np.sum(self.loglik_terms))

    @property
    def log_likelihood(self) -> float:
        """Full Gaussian log-likelihood, including the ``2 pi`` constant."""
        return -0.5 * self.n_observed * LOG_2PI + 0.5 * self.total

    @property
    def nll(self) -> float:
        return -self.log_likelihood

    def __len__(self) -> int:
        return self.times.size


def _measurements(theta: ParamVector, panel: ObservationPanel):
    """Yield the measurement system for each date, reusing it while tau repeats."""
    tau = panel.tau
    meas = None
    for k in range(len(panel)):
        if meas is None or not np.array_equal(tau[k], tau[k - 1]):
            meas = measurement_system(theta, tau[k])
        yield meas


def kf_run(
    theta: ParamVector, panel: ObservationPanel, dt: float, joseph: bool = True
) -> FilterOutput:
    """Filter ``panel`` from the stationary distribution and keep every step."""
    validate_params(theta)
    trans = transition_system(theta, dt)
    a0, P0 = stationary_moments(theta)
    state = FilterState(a0, P0)

    T, n = panel.y.shape
    a_pred = np.empty((T, 2))
    P_pred = np.empty((T, 2, 2))
    a = np.empty((T, 2))
    P = np.empty((T, 2, 2))
    e = np.empty((T, n))
    L = np.empty((T, n, n))
    terms = np.empty(T)
    for k, meas in enumerate(_measurements(theta, panel)):
        try:
            step = kf_step(state, trans, meas, panel.y[k], joseph=joseph)
        except NumericalError as exc:
            raise NumericalError(str(exc), step=k) from exc
        state = step.state
        a_pred[k], P_pred[k] = step.predicted.a, step.predicted.P
        a[k], P[k] = state.a, state.P
        e[k], L[k], terms[k] = step.e, step.L, step.loglik
    return FilterOutput(
        times=panel.times.copy(),
        a_pred=a_pred,
        P_pred=P_pred,
        a=a,
        P=P,
        e=e,
        L=L,
        loglik_terms=terms,
        n_observed=int(np.count_nonzero(~np.isnan(panel.y))),
    )


class _PanelArrays:
    """Contiguous copies of a panel reused across many likelihood calls."""

    def __init__(self, panel: ObservationPanel):
        self.y = np.ascontiguousarray(panel.y, dtype=float)
        self.constant = panel.maturities.is_constant
        self.tau = np.ascontiguousarray(panel.tau[:1] if self.constant else panel.tau)


_cache: dict[int, tuple[ObservationPanel, _PanelArrays]] = {}


def _panel_arrays(panel: ObservationPanel) -> _PanelArrays:
    hit = _cache.get(id(panel))
    if hit is not None and hit[0] is panel:
        return hit[1]
    arrays = _PanelArrays(panel)
    if len(_cache) > 32:
        _cache.clear()
    _cache[id(panel)] = (panel, arrays)
    return arrays


def neg_log_likelihood(
    theta: ParamVector, panel: ObservationPanel, dt: float, fast: bool = True
) -> float:
    """Negative Gaussian log-likelihood of ``panel`` under ``theta``.

    Returns ``inf`` for invalid parameters or a numerical failure, so it can
    be handed straight to an optimiser. ``fast=False`` evaluates through
    :func:`kf_run` instead of the compiled loop.
    """
    try:
        validate_params(theta)
        if not fast:
            return kf_run(theta, panel, dt).nll
        arrays = _panel_arrays(panel)
        tau = arrays.tau
        trans = transition_system(theta, dt)
        a0, P0 = stationary_moments(theta)
        d = np.atleast_2d(a_function(theta, tau))
        fk = np.exp(-theta.kappa * tau)
        fg = np.exp(-theta.gamma * tau)
        vdiag = theta.noise_sd(panel.n_contracts) ** 2
    except (ParameterError, NumericalError, ValueError):
        return math.inf
    total, n_obs = _kernels.filter_loglik(
        a0, P0, trans.c, np.diag(trans.G).copy(), trans.W,
        d, fk, fg, vdiag, arrays.y, arrays.constant,
    )
    if not math.isfinite(total):
        return math.inf
    return 0.5 * (n_obs * LOG_2PI + total)


@dataclass(frozen=True, eq=False)
class Band:
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True, eq=False)
class ConfidenceBands:
    level: float
    z: float
    chi: Band
    xi: Band
    spot: Band


def state_confidence_band(out: FilterOutput, level: float = 0.95) -> ConfidenceBands:
    """Pointwise normal bands for the filtered factors and the spot price.

    The spot band exponentiates the band of ``chi + xi``, so its centre is
    ``exp(a_chi + a_xi)``.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    z = float(norm.ppf(0.5 + level / 2.0))
    sd_chi = np.sqrt(np.clip(out.P[:, 0, 0], 0.0, None))
    sd_xi = np.sqrt(np.clip(out.P[:, 1, 1], 0.0, None))
    m_log = out.a[:, 0] + out.a[:, 1]
    var_log = out.P[:, 0, 0] + out.P[:, 1, 1] + 2.0 * out.P[:, 0, 1]
    sd_log = np.sqrt(np.clip(var_log, 0.0, None))
    chi = Band(out.a[:, 0], out.a[:, 0] - z * sd_chi, out.a[:, 0] + z * sd_chi)
    xi = Band(out.a[:, 1], out.a[:, 1] - z * sd_xi, out.a[:, 1] + z * sd_xi)
    spot = Band(np.exp(m_log), np.exp(m_log - z * sd_log), np.exp(m_log + z * sd_log))
    return ConfidenceBands(level=level, z=z, chi=chi, xi=xi, spot=spot)
