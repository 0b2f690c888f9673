"""Grid-search initialisation and constrained maximum-likelihood estimation.

Estimation runs in an unconstrained coordinate system in which every
point is feasible, including the identification constraint
``kappa >= gamma``::

    gamma = exp(g)        kappa = gamma + exp(u)
    sigma = exp(.)        rho = tanh(.)        s = exp(.)
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .kalman import FilterOutput, kf_run, neg_log_likelihood
from .model import ParameterError, ParamVector, validate_params
from .simulate import (
    RngSeed,
    constant_schedule,
    make_maturity_schedule,
    simulate_observations,
    simulate_states,
)

logger = logging.getLogger(__name__)

__all__ = [
    "BudgetError",
    "EstimationError",
    "SearchBox",
    "OptimizerSettings",
    "EstimationResult",
    "StudyRecord",
    "DEFAULT_BOX",
    "TABLE_PARAMS",
    "grid_points",
    "grid_search",
    "mle",
    "estimate_full",
    "convergence_study",
    "error_rows",
    "table_values",
    "to_unconstrained",
    "from_unconstrained",
]

# Column order of the results table: kappa, gamma, mu, sigma_chi, sigma_xi, rho, s.
TABLE_PARAMS = ("kappa", "gamma", "mu_xi", "sigma_chi", "sigma_xi", "rho", "s")
GRID_PARAMS = TABLE_PARAMS + ("lambda_chi", "lambda_xi")

# Smallest kappa - gamma gap representable in the log-gap coordinate.
_MIN_GAP = 1e-6


class BudgetError(ValueError):
    """The grid has more points than the configured budget."""


class EstimationError(RuntimeError):
    """Estimation cannot proceed, e.g. every grid point has infinite NLL."""


@dataclass(frozen=True)
class SearchBox:
    """Per-parameter ``(lower, upper, count)`` search intervals.

    ``count`` points are spread evenly over ``[lower, upper]`` including both
    ends; a single point sits at the midpoint. Parameters without an
    interval (by default the risk premia) are held at ``fixed``.
    """

    ranges: Mapping[str, tuple[float, float, int]]
    fixed: Mapping[str, float] = field(
        default_factory=lambda: {"lambda_chi": 0.0, "lambda_xi": 0.0}
    )
    budget: int = 100_000

    def __post_init__(self):
        for name, spec in self.ranges.items():
            if name not in GRID_PARAMS:
                raise ParameterError(f"unknown search parameter {name!r}")
            lo, hi, count = spec
            if not lo < hi:
                raise ParameterError(f"{name}: lower bound {lo} must be below upper bound {hi}")
            if int(count) != count or count < 1:
                raise ParameterError(f"{name}: grid count must be a positive integer")
            if name in ("kappa", "gamma", "sigma_chi", "sigma_xi", "s") and lo <= 0:
                raise ParameterError(f"{name}: search interval must be positive")
            if name == "rho" and not (-1 < lo and hi < 1):
                raise ParameterError("rho: search interval must lie inside (-1, 1)")
        missing = set(TABLE_PARAMS) - set(self.ranges)
        if missing:
            raise ParameterError(f"search box lacks {', '.join(sorted(missing))}")

    def axis(self, name: str) -> np.ndarray:
        lo, hi, count = self.ranges[name]
        if count == 1:
            return np.array([0.5 * (lo + hi)])
        return np.linspace(lo, hi, int(count))

    @property
    def size(self) -> int:
        return math.prod(int(spec[2]) for spec in self.ranges.values())

    def to_dict(self) -> dict:
        return {
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "fixed": dict(self.fixed),
            "budget": self.budget,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SearchBox":
        ranges = {k: (float(v[0]), float(v[1]), int(v[2])) for k, v in data["ranges"].items()}
        kwargs = {"ranges": ranges}
        if "fixed" in data:
            kwargs["fixed"] = {k: float(v) for k, v in data["fixed"].items()}
        if "budget" in data:
            kwargs["budget"] = int(data["budget"])
        return cls(**kwargs)


DEFAULT_BOX = SearchBox(
    {
        "kappa": (0.25, 3.0, 4),
        "gamma": (0.25, 3.0, 4),
        "mu_xi": (-3.0, 2.0, 3),
        "sigma_chi": (0.25, 2.0, 3),
        "sigma_xi": (0.25, 2.0, 3),
        "rho": (-0.75, 0.75, 3),
        "s": (0.01, 1.0, 3),
    }
)


@dataclass(frozen=True)
class OptimizerSettings:
    """Nelder-Mead settings.

    Convergence requires both the NLL spread over the simplex to fall below
    ``fatol`` and the vertex spread below ``xatol`` (transformed units).
    Each run is capped at ``max_iter`` iterations. After a run ends the
    simplex is rebuilt around the best vertex, up to ``restarts`` times,
    stopping once a restart converges without improving.
    """

    max_iter: int = 5000
    fatol: float = 1e-8
    xatol: float = 1e-6
    initial_step: float = 0.2
    restarts: int = 2
    estimate_lambda: bool = False
    workers: int = 1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class EstimationResult:
    theta_hat: ParamVector
    nll: float
    theta0: ParamVector
    nll0: float
    iterations: int
    evaluations: int
    converged: bool
    constraint_active: bool
    message: str = ""

    def table_row(self, n_t: int) -> list:
        return [n_t, *table_values(self.theta_hat), self.nll]

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.to_dict(),
            "nll": self.nll,
            "theta0": self.theta0.to_dict(),
            "nll0": self.nll0,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "converged": self.converged,
            "constraint_active": self.constraint_active,
            "message": self.message,
        }


def table_values(theta: ParamVector) -> list[float]:
    """``(kappa, gamma, mu, sigma_chi, sigma_xi, rho, s)``; untied s is averaged."""
    s = theta.s[0] if len(theta.s) == 1 else float(np.mean(theta.s))
    return [theta.kappa, theta.gamma, theta.mu_xi, theta.sigma_chi, theta.sigma_xi, theta.rho, s]


def grid_points(box: SearchBox) -> list[ParamVector]:
    """Every point of the box's Cartesian grid satisfying ``kappa >= gamma``."""
    if box.size > box.budget:
        raise BudgetError(f"grid has {box.size} points, budget is {box.budget}")
    names = list(box.ranges)
    axes = [box.axis(name) for name in names]
    points = []
    for combo in itertools.product(*axes):
        values = dict(zip(names, (float(v) for v in combo)))
        if values["kappa"] < values["gamma"]:
            continue
        values.update({k: v for k, v in box.fixed.items() if k not in values})
        values["s"] = (values["s"],)
        points.append(ParamVector(**values))
    return points


def _evaluate(points: Sequence[ParamVector], panel, dt: float, workers: int) -> np.ndarray:
    if workers <= 1 or len(points) < 2 * workers:
        return np.array([neg_log_likelihood(p, panel, dt) for p in points])
    # The compiled loop releases the GIL; results land by index so the
    # reduction below does not depend on scheduling.
    chunks = np.array_split(np.arange(len(points)), workers)
    out = np.empty(len(points))

    def run(idx):
        for i in idx:
            out[i] = neg_log_likelihood(points[i], panel, dt)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(run, chunks))
    return out


def grid_search(
    box: SearchBox, panel, dt: float, workers: int = 1, return_values: bool = False
):
    """Feasible grid point with the smallest NLL (lowest index wins ties)."""
    points = grid_points(box)
    if not points:
        raise EstimationError("no grid point satisfies kappa >= gamma")
    values = _evaluate(points, panel, dt, workers)
    if not np.isfinite(values).any():
        raise EstimationError("every grid point has infinite NLL")
    best = int(np.argmin(values))
    logger.info("grid search: %d points, best NLL %.6f", len(points), values[best])
    if return_values:
        return points[best], values[best], points, values
    return points[best]


class _Layout:
    """Maps a ParamVector to and from the unconstrained coordinates."""

    def __init__(self, template: ParamVector, estimate_lambda: bool):
        self.template = template
        self.estimate_lambda = estimate_lambda
        self.n_s = len(template.s)

    def to_vector(self, theta: ParamVector) -> np.ndarray:
        gap = max(theta.kappa - theta.gamma, _MIN_GAP)
        parts = [
            math.log(theta.gamma),
            math.log(gap),
            theta.mu_xi,
            math.log(theta.sigma_chi),
            math.log(theta.sigma_xi),
            math.atanh(theta.rho),
            *np.log(theta.s),
        ]
        if self.estimate_lambda:
            parts += [theta.lambda_chi, theta.lambda_xi]
        return np.array(parts, dtype=float)

    def to_theta(self, z: np.ndarray) -> ParamVector:
        gamma = math.exp(z[0])
        kappa = gamma + math.exp(z[1])
        s = tuple(np.exp(z[6 : 6 + self.n_s]))
        changes = dict(
            kappa=kappa,
            gamma=gamma,
            mu_xi=float(z[2]),
            sigma_chi=math.exp(z[3]),
            sigma_xi=math.exp(z[4]),
            rho=math.tanh(z[5]),
            s=s,
        )
        if self.estimate_lambda:
            changes["lambda_chi"] = float(z[6 + self.n_s])
            changes["lambda_xi"] = float(z[7 + self.n_s])
        return self.template.replace(**changes)


def to_unconstrained(theta: ParamVector, estimate_lambda: bool = False) -> np.ndarray:
    return _Layout(theta, estimate_lambda).to_vector(theta)


def from_unconstrained(
    z: np.ndarray, template: ParamVector, estimate_lambda: bool = False
) -> ParamVector:
    return _Layout(template, estimate_lambda).to_theta(z)


def mle(
    theta0: ParamVector, panel, dt: float, opts: OptimizerSettings | None = None
) -> EstimationResult:
    """Minimise the NLL from ``theta0`` subject to ``kappa >= gamma``."""
    opts = opts or OptimizerSettings()
    validate_params(theta0)
    if theta0.kappa < theta0.gamma:
        raise ParameterError("starting point must satisfy kappa >= gamma")
    layout = _Layout(theta0, opts.estimate_lambda)
    nll0 = neg_log_likelihood(theta0, panel, dt)
    if not math.isfinite(nll0):
        raise EstimationError("NLL is infinite at the starting point")

    def objective(z):
        if not np.all(np.isfinite(z)) or np.any(np.abs(z) > 700):
            return math.inf
        try:
            return neg_log_likelihood(layout.to_theta(z), panel, dt)
        except (ParameterError, OverflowError, ValueError):
            return math.inf

    z = layout.to_vector(theta0)
    best_f = objective(z)
    iterations = evaluations = 0
    converged = False
    message = ""
    for _ in range(opts.restarts + 1):
        simplex = np.vstack([z, z + opts.initial_step * np.eye(z.size)])
        res = minimize(
            objective,
            z,
            method="Nelder-Mead",
            options={
                "initial_simplex": simplex,
                "xatol": opts.xatol,
                "fatol": opts.fatol,
                "maxiter": opts.max_iter,
                "maxfev": 50 * opts.max_iter,
                "adaptive": False,
            },
        )
        iterations += int(res.nit)
        evaluations += int(res.nfev)
        converged = bool(res.success)
        message = str(res.message)
        improved = best_f - res.fun
        if res.fun <= best_f:
            z, best_f = res.x, float(res.fun)
        if converged and improved <= opts.fatol:
            break

    theta_hat = layout.to_theta(z)
    if not best_f <= nll0:
        # The log-gap coordinate cannot hold kappa == gamma exactly.
        theta_hat, best_f = theta0, nll0
    active = theta_hat.kappa - theta_hat.gamma <= 1e-6 * max(theta_hat.gamma, 1.0)
    return EstimationResult(
        theta_hat=theta_hat,
        nll=float(best_f),
        theta0=theta0,
        nll0=float(nll0),
        iterations=iterations,
        evaluations=evaluations,
        converged=converged,
        constraint_active=bool(active),
        message=message,
    )


def estimate_full(
    panel, box: SearchBox, dt: float, opts: OptimizerSettings | None = None
) -> tuple[EstimationResult, FilterOutput]:
    """Grid search, then constrained MLE, then the filter at the estimate."""
    opts = opts or OptimizerSettings()
    theta0 = grid_search(box, panel, dt, workers=opts.workers)
    logger.info("best initial values: %s", _fmt_row(table_values(theta0)))
    result = mle(theta0, panel, dt, opts)
    return result, kf_run(result.theta_hat, panel, dt)


def _fmt_row(values: Iterable[float]) -> str:
    return " ".join(f"{v:.4f}" for v in values)


@dataclass(frozen=True, eq=False)
class StudyRecord:
    n_t: int
    replication: int
    result: EstimationResult | None
    error: str = ""


def _study_cell(theta_true, n_t, cell_seed, dt, schedule_for, box, opts):
    path = simulate_states(theta_true, None, dt, n_t, cell_seed.child(0))
    schedule = schedule_for(n_t)
    panel = simulate_observations(theta_true, path, schedule, cell_seed.child(1))
    result, _ = estimate_full(panel, box, dt, opts)
    return result


def convergence_study(
    theta_true: ParamVector,
    sizes: Sequence[int],
    replications: int,
    seed: int | RngSeed,
    *,
    dt: float = 1 / 360,
    n_contracts: int = 5,
    spacing: float = 1 / 12,
    rolling: bool = False,
    maturities: Sequence[float] | None = None,
    box: SearchBox = DEFAULT_BOX,
    opts: OptimizerSettings | None = None,
    workers: int = 1,
) -> list[StudyRecord]:
    """Simulate and estimate ``replications`` panels at each sample size.

    Each (size, replication) cell draws from its own stream. A failed cell is
    recorded with its error message rather than aborting the study. An
    explicit ``maturities`` ladder replaces the ``n_contracts``/``spacing``
    strip.
    """
    validate_params(theta_true)
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    opts = opts or OptimizerSettings()
    master = seed if isinstance(seed, RngSeed) else RngSeed(int(seed))
    cells = [(i, n_t, rep) for i, n_t in enumerate(sizes) for rep in range(replications)]

    def schedule_for(n_t):
        if maturities is not None:
            return constant_schedule(maturities, n_t)
        return make_maturity_schedule(n_contracts, spacing, n_t, dt, rolling=rolling)

    def run(cell):
        i, n_t, rep = cell
        try:
            result = _study_cell(
                theta_true, n_t, master.child(i, rep), dt, schedule_for, box, opts
            )
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            logger.warning("n_t=%d replication=%d failed: %s", n_t, rep, exc)
            return StudyRecord(n_t, rep, None, f"{type(exc).__name__}: {exc}")
        logger.info("n_t=%d replication=%d: %s", n_t, rep, _fmt_row(table_values(result.theta_hat)))
        return StudyRecord(n_t, rep, result)

    if workers <= 1:
        return [run(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, cells))


def error_rows(records: Sequence[StudyRecord], theta_true: ParamVector) -> list[tuple]:
    """``(n_t, replication, param, estimate - truth)`` rows; NaN for failed cells."""
    truth = table_values(theta_true)
    rows = []
    for rec in records:
        est = table_values(rec.result.theta_hat) if rec.result else [math.nan] * len(truth)
        for name, e, t in zip(TABLE_PARAMS, est, truth):
            rows.append((rec.n_t, rec.replication, name, e - t))
    return rows
