"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or incompatible shapes.

    ``field`` names the offending configuration entry when there is one, so
    command-line tools can report it precisely.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite.

    Carries the last parameters that produced a finite loss.
    """

    def __init__(self, step, params, buffers):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.params = params
        self.buffers = buffers


class DeterminismError(RuntimeError):
    """Sequential and thread-pool tower schedules produced different outputs."""
