"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input values violate a documented precondition."""


class DimensionError(ValidationError):
    """Operands have incompatible shapes."""


class DegenerateRowError(ValueError):
    """A positive sub-affinity row whose mass underflowed to zero."""


class TrackingFailure(RuntimeError):
    """Patch tracking could not find enough reliable matches."""


class ConfigError(ValueError):
    """Malformed configuration file or unusable dataset layout."""


class TrainAbort(RuntimeError):
    """Training stopped on a non-finite loss."""
