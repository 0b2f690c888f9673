"""Exact simulation of latent factor paths and futures observation panels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ParamVector,
    StateVec,
    measurement_system,
    stationary_moments,
    transition_system,
    validate_params,
)

__all__ = [
    "RngSeed",
    "StatePath",
    "MaturitySchedule",
    "ObservationPanel",
    "simulate_states",
    "make_maturity_schedule",
    "constant_schedule",
    "simulate_observations",
    "spot_from_states",
]


@dataclass(frozen=True)
class RngSeed:
    """A master seed plus a stream id; each pair yields an independent stream."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "RngSeed":
        # Nested replication/worker streams from one master seed.
        stream = self.stream
        for k in keys:
            stream = stream * 1_000_003 + int(k) + 1
        return RngSeed(self.seed, stream)


@dataclass(frozen=True, eq=False)
class StatePath:
    times: np.ndarray  # (T,)
    states: np.ndarray  # (T, 2) columns chi, xi
    x0: StateVec
    dt: float

    def __post_init__(self):
        if self.states.shape != (self.times.size, 2):
            raise ValueError("states must have shape (len(times), 2)")

    @property
    def chi(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def xi(self) -> np.ndarray:
        return self.states[:, 1]

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True, eq=False)
class MaturitySchedule:
    tau: np.ndarray  # (T, n) times-to-maturity per observation date
    rolling: bool = False

    def __post_init__(self):
        if self.tau.ndim != 2:
            raise ValueError("maturity schedule must be two-dimensional")
        if np.any(self.tau < 0):
            raise ValueError("times-to-maturity must be non-negative")

    @property
    def n_contracts(self) -> int:
        return self.tau.shape[1]

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.tau == self.tau[:1]))

    def __len__(self) -> int:
        return self.tau.shape[0]


@dataclass(frozen=True, eq=False)
class ObservationPanel:
    times: np.ndarray  # (T,)
    maturities: MaturitySchedule
    y: np.ndarray  # (T, n) log futures prices; NaN marks a missing quote

    def __post_init__(self):
        T = self.times.size
        if self.y.ndim != 2 or self.y.shape != self.maturities.tau.shape:
            raise ValueError(
                f"y has shape {self.y.shape}, schedule has {self.maturities.tau.shape}"
            )
        if self.y.shape[0] != T:
            raise ValueError(f"{T} dates but {self.y.shape[0]} observation rows")

    @property
    def tau(self) -> np.ndarray:
        return self.maturities.tau

    @property
    def n_contracts(self) -> int:
        return self.y.shape[1]

    def __len__(self) -> int:
        return self.times.size

    def head(self, n_t: int) -> "ObservationPanel":
        return ObservationPanel(
            self.times[:n_t],
            MaturitySchedule(self.tau[:n_t], self.maturities.rolling),
            self.y[:n_t],
        )


def simulate_states(
    theta: ParamVector,
    x0: StateVec | None,
    dt: float,
    n_steps: int,
    seed: RngSeed,
) -> StatePath:
    """Simulate ``n_steps`` exact AR(1) transitions of the factor pair.

    With ``x0=None`` the start is drawn from the stationary distribution.
    """
    validate_params(theta)
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    sys = transition_system(theta, dt)
    rng = seed.generator()
    if x0 is None:
        a0, P0 = stationary_moments(theta)
        x0 = StateVec(*(a0 + np.linalg.cholesky(P0) @ rng.standard_normal(2)))
    # Raises LinAlgError when W is not positive definite.
    chol = _lower_factor(sys.W)
    shocks = rng.standard_normal((n_steps, 2)) @ chol.T
    g = np.diag(sys.G)
    states = np.empty((n_steps, 2))
    x = x0.as_array()
    for k in range(n_steps):
        x = sys.c + g * x + shocks[k]
        states[k] = x
    times = dt * np.arange(1, n_steps + 1)
    return StatePath(times=times, states=states, x0=x0, dt=float(dt))


def _lower_factor(W: np.ndarray) -> np.ndarray:
    # W can underflow to an exactly-zero matrix for vanishing volatilities;
    # the zero factor is then the correct square root.
    if not np.any(W):
        return np.zeros_like(W)
    return np.linalg.cholesky(W)


def make_maturity_schedule(
    n_contracts: int,
    spacing: float,
    n_steps: int,
    dt: float,
    rolling: bool = False,
) -> MaturitySchedule:
    """Times-to-maturity of ``n_contracts`` futures on each of ``n_steps`` dates.

    Constant mode quotes ``spacing, 2*spacing, ...`` on every date. Rolling
    mode holds calendar maturities fixed so every tau decays by ``dt`` per
    date; when the front contract reaches expiry the strip rolls forward and
    the new front contract has ``tau == spacing`` again.
    """
    if n_contracts < 1:
        raise ValueError("n_contracts must be at least 1")
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    base = spacing * np.arange(1, n_contracts + 1)
    if not rolling:
        return MaturitySchedule(np.tile(base, (n_steps, 1)), rolling=False)
    t = dt * np.arange(1, n_steps + 1)
    # Elapsed time since the last roll, guarded against float drift so that
    # exact multiples of spacing register as a roll.
    cycles = np.floor(t / spacing + 1e-9)
    elapsed = np.clip(t - cycles * spacing, 0.0, None)
    return MaturitySchedule(base[None, :] - elapsed[:, None], rolling=True)


def constant_schedule(maturities, n_steps: int) -> MaturitySchedule:
    """The same explicit times-to-maturity on every one of ``n_steps`` dates."""
    tau = np.asarray(maturities, dtype=float).reshape(1, -1)
    if tau.size == 0:
        raise ValueError("at least one maturity is required")
    return MaturitySchedule(np.repeat(tau, n_steps, axis=0), rolling=False)


def simulate_observations(
    theta: ParamVector,
    path: StatePath,
    schedule: MaturitySchedule,
    seed: RngSeed,
) -> ObservationPanel:
    """Noisy log futures prices ``y_t = d_t + F_t' x_t + v_t`` along ``path``."""
    validate_params(theta)
    if len(schedule) != len(path):
        raise ValueError(
            f"schedule has {len(schedule)} dates but path has {len(path)} states"
        )
    n = schedule.n_contracts
    sd = theta.noise_sd(n)
    rng = seed.generator()
    noise = rng.standard_normal((len(path), n)) * sd
    y = _noiseless(theta, path.states, schedule) + noise
    return ObservationPanel(times=path.times.copy(), maturities=schedule, y=y)


def _noiseless(theta: ParamVector, states: np.ndarray, schedule: MaturitySchedule) -> np.ndarray:
    if schedule.is_constant:
        meas = measurement_system(theta, schedule.tau[0])
        return meas.d[None, :] + states @ meas.F
    out = np.empty(schedule.tau.shape)
    for k, tau in enumerate(schedule.tau):
        meas = measurement_system(theta, tau)
        out[k] = meas.d + meas.F.T @ states[k]
    return out


def spot_from_states(path: StatePath | np.ndarray) -> np.ndarray:
    """Spot prices ``exp(chi + xi)``."""
    states = path.states if isinstance(path, StatePath) else np.asarray(path)
    return np.exp(states[..., 0] + states[..., 1])
