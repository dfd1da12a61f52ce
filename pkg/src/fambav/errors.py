"""Exception types shared across the package."""


class FambaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FambaError):
    """Tensor shapes are incompatible with the requested operation."""


class IndexRangeError(FambaError, IndexError):
    """An integer index falls outside the valid range."""


class ContractError(FambaError):
    """An operation's pre/postcondition was violated (e.g. non-finite input)."""


class NumericalError(ContractError):
    """A computation produced non-finite values where finite ones are required."""


class PlanError(FambaError):
    """A fusion plan is infeasible for the given sequence length."""


class FusionError(FambaError):
    """The token sequence cannot support the requested fusion."""


class ConfigError(FambaError):
    """Invalid experiment or model configuration."""


class FormatError(FambaError):
    """A binary or text input file does not conform to its documented layout."""
