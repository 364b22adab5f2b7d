"""Exception types shared across the package."""


class AdaptationError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AdaptationError):
    """Operands have incompatible shapes or lengths."""


class DegenerateDomain(AdaptationError):
    """A feature set is too small or too collapsed to define a subspace."""


class ConfigError(AdaptationError):
    """A configuration value or input file violates its constraints."""


class NumericalError(AdaptationError):
    """A computation produced a non-finite value.

    Instances raised during an adaptation run carry ``step`` and
    ``last_good_params`` attributes so callers can checkpoint the most
    recent healthy state before exiting.
    """

    step: int | None = None
    last_good_params = None
