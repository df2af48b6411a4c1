"""Exception hierarchy shared by the whole engine.

The CLI maps these onto exit codes: UsageError/DomainError -> 1,
DataError -> 2, NumericError -> 3.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class UsageError(EngineError):
    """Caller misuse: bad shapes, bad indices, invalid configuration."""


class DomainError(EngineError):
    """Mathematical domain violation (zero norm, non-positive temperature, log of non-positive)."""


class DataError(EngineError):
    """Bad or inconsistent data: file format violations, unknown ids, mismatched category lists."""


class NumericError(EngineError):
    """Non-finite values where finite ones are required; training aborts carry the offending term."""
