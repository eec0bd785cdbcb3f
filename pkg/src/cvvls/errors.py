"""Exception types shared across the pipeline."""


class SimulationIntegrityError(RuntimeError):
    """Vehicles overlapped, collided, or ran a red light."""


class EncodingConflictError(ValueError):
    """Two vehicles mapped to the same road cell."""


class InsufficientHistoryError(LookupError):
    """A temporal window reaches before the start of the log."""


class ContractError(ValueError):
    """Inputs violate an operation's shape or precondition contract."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""
