"""Error taxonomy shared by every dascan module.

Four families, matching the kinds of failure a numerical library can
actually attribute: shapes that cannot combine, interface contracts the
caller broke, values outside an operation's domain, and numerics that
went non-finite at runtime.
"""


class DascanError(Exception):
    """Base class for all library errors."""


class ShapeError(DascanError, ValueError):
    """Operands whose shapes cannot be combined or are malformed."""


class ContractError(DascanError, ValueError):
    """An interface contract was violated (wrong kind of argument, not a
    wrong value): non-scalar loss, invalid permutation, token-dependent
    parameters passed to a static-kernel routine, and the like."""


class FormatError(ContractError):
    """Serialized payload violates its binary or text format contract."""


class DomainError(DascanError, ValueError):
    """A value is outside the mathematical domain of the operation
    (non-positive step size, zero-sized axis, window larger than the
    grid, ...)."""


class NumericsError(DascanError, ArithmeticError):
    """A computation produced non-finite values at runtime."""
