"""Exception types shared across the package."""


class SizingError(ValueError):
    """A size/shape parameter is incompatible with the input."""


class DispatchError(TypeError):
    """A corruption was applied to a covariate kind it does not support."""


class UndefinedWeightError(ValueError):
    """A reweighting denominator fell below the probability floor."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss or otherwise failed."""


class ConfigError(ValueError):
    """An experiment or CLI configuration is invalid."""
