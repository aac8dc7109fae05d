"""Exception types raised across the package."""


class VittmError(Exception):
    """Base class for all package errors."""


class DimensionError(VittmError, ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(VittmError, ValueError):
    """A model, preset or data configuration is invalid."""


class ContractError(VittmError, RuntimeError):
    """A call violated an operation precondition."""


class FormatError(VittmError, ValueError):
    """A binary file is corrupt or has the wrong layout."""


class CompatibilityError(VittmError, ValueError):
    """A checkpoint does not match the model it is loaded into."""
