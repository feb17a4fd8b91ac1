"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A spec, config value, or argument is outside its legal range."""


class InsufficientDataError(ValueError):
    """Too few examples to evaluate the requested statistic."""


class DegenerateSelectionError(ValueError):
    """A selection rule accepted nothing, so selective quantities are undefined."""


class NumericError(ValueError):
    """Non-finite values where finite numbers are required."""


class ModelStateError(RuntimeError):
    """Operation requires state (a fit, a cached forward pass) that is missing."""


class TrainingError(RuntimeError):
    """Training could not proceed or diverged."""
