"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An input breaks a documented precondition (wrong shape, bad range, ...)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
