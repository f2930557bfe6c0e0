"""Exception hierarchy shared across the package."""


class FpgrowError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(FpgrowError, ValueError):
    pass


class NumericError(FpgrowError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ZeroMatrixError(NumericError):
    pass


class ZeroVectorError(NumericError):
    pass


class InputError(FpgrowError, ValueError):
    pass


class PlanError(FpgrowError, ValueError):
    pass


class StructureError(FpgrowError, ValueError):
    pass


class ConfigError(FpgrowError, ValueError):
    pass


class ConvergenceError(FpgrowError, RuntimeError):
    exit_code = 3

    def __init__(self, message, final_accuracy):
        super().__init__(message)
        self.final_accuracy = final_accuracy


class CheckpointError(FpgrowError, IOError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptTable(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass
