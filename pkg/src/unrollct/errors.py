"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Bad argument or malformed input."""


class NumericalFailure(ArithmeticError):
    """A solver or optimizer produced non-finite values or diverged."""


class ContractViolation(RuntimeError):
    """An internal precondition was not met (e.g. backward before forward)."""


class StaleDataset(RuntimeError):
    """Dataset contents do not match the manifest hashes."""
