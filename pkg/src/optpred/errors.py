"""Exception hierarchy shared by all modules."""


class OptPredError(Exception):
    """Base class for all errors raised by optpred."""


class InvalidInputError(OptPredError, ValueError):
    """Shapes or parameters are inconsistent."""


class IllConditionedConstraintsError(OptPredError):
    """The constraint covariance matrix is not safely positive definite."""


class UnsupportedOrderError(OptPredError, ValueError):
    pass


class InvalidProfileError(OptPredError, ValueError):
    """A covariance profile does not define an SPD circulant."""


class TuningError(OptPredError):
    """A Metropolis chain finished with an acceptance rate outside the allowed band."""


class DegenerateConstraintsError(OptPredError):
    """The constraint matrix does not have full row rank."""


class InvalidInitError(OptPredError, ValueError):
    pass


class InvalidStepError(OptPredError, ValueError):
    """Time step outside the stability region of the integrator."""


class DivergenceError(OptPredError, FloatingPointError):
    """Integration produced a non-finite state."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ConfigError(OptPredError, ValueError):
    pass
