"""Exception types shared across the simulator."""


class PreconditionError(ValueError):
    """An argument violates a documented shape or range requirement."""


class NumericalError(ArithmeticError):
    """A numerical kernel failed (non-convergence, non-finite output)."""


class DivergenceError(NumericalError):
    """The iterate became non-finite during training.

    Carries the step at which the blow-up was detected and whatever metrics
    rows were produced before it.
    """

    def __init__(self, step, metrics=None):
        self.step = step
        self.metrics = list(metrics or [])
        super().__init__(f"non-finite iterate after step {step}")


class ConfigError(ValueError):
    """Invalid experiment configuration or sweep specification."""
