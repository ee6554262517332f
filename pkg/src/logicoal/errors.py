"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class InsufficientPopulationError(ValueError):
    """A sample of size m was requested from a population smaller than m."""


class ExtinctPopulationError(ValueError):
    """An operation that requires living individuals hit an empty population."""


class UnsupportedOrderError(ValueError):
    """A derivative order above the configured maximum was requested."""


class QuadratureError(RuntimeError):
    """Numerical integration failed to converge to the requested tolerance."""


class UltrametricError(ValueError):
    """A coalescence matrix violated the two-smallest-equal property."""


class NewickError(ValueError):
    """A tree could not be serialized."""
