"""Mean prediction of coarse collective variables by conditioning an invariant measure."""
from .conditioning import (
    ConditionedGaussian,
    Field,
    GaussianConditioner,
    GaussianMoments,
    KernelSet,
    SpectralGaussian,
    SpectralKernelSet,
    conditional_covariance,
    conditional_cubic,
    conditional_mean,
    constraint_covariance,
    regression_coefficients,
    wick_moment,
)
from .errors import *  # noqa: F401,F403
from .ode import OdeProblem, Trajectory, integrate
from .policy import DEFAULT_POLICY, NumericalPolicy

__version__ = "0.1.0"
