"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
CapacityError -> 4.
"""


class HessfineError(Exception):
    """Base class for all library errors."""


class ConfigError(HessfineError, ValueError):
    pass


class DimensionError(HessfineError, ValueError):
    pass


class NumericError(HessfineError, ArithmeticError):
    """Non-finite values, divergence, or a solver that failed to converge."""


class SingularMatrixError(NumericError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class SingularNetworkError(NumericError):
    pass


class CapacityError(HessfineError):
    def __init__(self, message, layer=None, size=None, cap=None):
        super().__init__(message)
        self.layer = layer
        self.size = size
        self.cap = cap


class CheckpointError(HessfineError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptPayloadError(CheckpointError):
    pass


class DataError(HessfineError, ValueError):
    pass
