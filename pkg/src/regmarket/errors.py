"""Exception hierarchy shared across the package."""


class RegMarketError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RegMarketError):
    """Invalid run configuration or parameters."""


class SchemaError(ConfigError):
    """CSV header does not match the declared schema."""


class DataError(RegMarketError):
    """A data file failed row-level validation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OrderingError(DataError):
    """Timestamps are not strictly increasing."""


class ParameterError(ConfigError):
    """An operation was called with out-of-contract arguments."""


class InsufficientDataError(RegMarketError):
    """Fewer rows than the operation requires."""


class FeatureLookupError(RegMarketError):
    """A named feature does not exist in the dataset or design."""


class SingularDesignError(RegMarketError):
    """Design matrix is rank deficient beyond what jitter may fix."""


class SingularUpdateError(RegMarketError):
    """Online memory matrix lost positive definiteness."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class ConvergenceError(RegMarketError):
    """Iterative fit did not reach the gradient tolerance."""

    def __init__(self, message, gradient_norm=None):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class NoSurplusError(RegMarketError):
    """Loss improvement is non-positive; the market clears at zero."""


class CoverageError(RegMarketError):
    """A coalition loss table is missing required entries."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class EnumerationCapError(RegMarketError):
    """Too many support features for exact power-set enumeration."""
