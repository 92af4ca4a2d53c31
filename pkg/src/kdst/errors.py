"""Exception types shared across the package."""


class KdstError(Exception):
    """Base class for all package errors."""


class DimensionError(KdstError, ValueError):
    pass


class ContractError(KdstError, ValueError):
    """A caller violated an operation's precondition."""


class NumericError(KdstError, ArithmeticError):
    pass


class ConfigError(KdstError, ValueError):
    pass


class InputError(KdstError, ValueError):
    pass


class DegenerateMaskError(ContractError):
    """A query row has no attendable key."""


class FormatError(InputError):
    pass
