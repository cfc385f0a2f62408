class ThermoError(Exception):
    pass


class DimensionMismatch(ThermoError, ValueError):
    pass


class NonFiniteState(ThermoError, ValueError):
    pass


class ReebDerivativeZero(ThermoError):
    pass


class SingularBasis(ThermoError):
    pass


class SingularHessian(ThermoError):
    pass


class ConfigError(ThermoError, ValueError):
    pass


class StepSizeUnderflow(ThermoError):
    pass


class NewtonDivergence(ThermoError):
    def __init__(self, message, iterations, residual):
        super().__init__(f'{message} (iterations: {iterations}, residual: {residual:.3e})')
        self.iterations = iterations
        self.residual = residual


class IntegrationFailure(ThermoError):
    """A stepper failed partway; `trajectory` holds everything computed before step `step`."""

    def __init__(self, step, trajectory, cause):
        super().__init__(f'integration failed at step {step}: {cause}')
        self.step = step
        self.trajectory = trajectory
        self.cause = cause
