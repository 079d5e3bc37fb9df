"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class TripleDMLError(Exception):
    pass


class ShapeError(TripleDMLError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TripleDMLError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(TripleDMLError, ValueError):
    pass


class DataError(TripleDMLError, ValueError):
    pass


class NumericError(TripleDMLError, ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""
