"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid grid, sample size, dimension or option combination."""


class SchemaError(ConfigurationError):
    """An experiment configuration document failed validation."""

    def __init__(self, message, offending=()):
        self.offending = tuple(offending)
        if self.offending:
            message = f"{message}: {', '.join(self.offending)}"
        super().__init__(message)


class SimulationBlowupError(RuntimeError):
    def __init__(self, step, path, what="state"):
        self.step = step
        self.path = path
        super().__init__(
            f"non-finite {what} at step {step} on path {path}; "
            "check coefficient growth and the time step"
        )


class RegressionError(RuntimeError):
    """Least-squares projection could not be computed."""


class NearSingularGainError(RuntimeError):
    """R + D*PD is (numerically) singular."""


class PositivityLossError(RuntimeError):
    """Riccati solution lost positive semidefiniteness."""


class ExperimentError(RuntimeError):
    """A module error raised while running a named experiment."""

    def __init__(self, experiment, cause):
        self.experiment = experiment
        self.cause = cause
        super().__init__(f"experiment {experiment!r} failed: {type(cause).__name__}: {cause}")
