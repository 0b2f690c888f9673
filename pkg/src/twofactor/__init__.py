"""Two-factor (short/long) commodity futures model: simulation, Kalman
filtering and constrained maximum-likelihood estimation."""

from .estimate import (
    DEFAULT_BOX,
    EstimationResult,
    OptimizerSettings,
    SearchBox,
    convergence_study,
    estimate_full,
    grid_search,
    mle,
)
from .kalman import (
    FilterOutput,
    FilterState,
    NumericalError,
    kf_run,
    kf_step,
    neg_log_likelihood,
    state_confidence_band,
)
from .model import (
    TRUE_THETA,
    ParameterError,
    ParamVector,
    StateVec,
    a_function,
    log_expected_spot,
    measurement_system,
    state_cov,
    state_mean,
    stationary_moments,
    swap_labels,
    transition_system,
    validate_params,
)
from .simulate import (
    ObservationPanel,
    RngSeed,
    StatePath,
    constant_schedule,
    make_maturity_schedule,
    simulate_observations,
    simulate_states,
    spot_from_states,
)

__version__ = "0.1.0"
