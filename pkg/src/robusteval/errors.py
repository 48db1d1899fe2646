"""Exception types shared across the toolkit."""

from robusteval.tensor import DimensionError, FormatError, NumericError, StaleGraphError


class ConfigError(ValueError):
    """Invalid configuration or hyperparameters."""


class TrainingError(RuntimeError):
    """Training diverged."""


class BuildError(RuntimeError):
    """A constructed test model failed one of its validity conditions."""

    def __init__(self, condition: str, message: str):
        super().__init__(f"condition {condition} failed: {message}")
        self.condition = condition


class BoundViolation(AssertionError):
    """An adversarial example left the allowed l-inf ball around its original."""


__all__ = [
    "BoundViolation",
    "BuildError",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "StaleGraphError",
    "TrainingError",
]
