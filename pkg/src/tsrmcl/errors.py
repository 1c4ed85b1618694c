"""Exception types shared across the library."""


class DimensionError(ValueError):
    """Shapes or axes do not line up for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateInputError(ValueError):
    """Input is mathematically degenerate for the operation (e.g. a zero vector)."""


class StaleCacheError(RuntimeError):
    """Cache holds entries for a different encoder parameter fingerprint."""
