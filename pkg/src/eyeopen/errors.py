"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries one.
"""


class EyeOpenError(Exception):
    exit_code = 1


class ConfigError(EyeOpenError):
    """Bad configuration: shapes, layer chains, flag combinations."""

    exit_code = 2


class UsageError(EyeOpenError):
    """API misuse, e.g. backward without a matching forward."""

    exit_code = 2


class DataError(EyeOpenError):
    """Input data violates a contract (labels, geometry, pixel range)."""

    exit_code = 2


class CheckpointError(EyeOpenError):
    exit_code = 3


class NumericError(EyeOpenError):
    """Non-finite values during forward, loss or update."""

    exit_code = 4


class TrainingError(NumericError):
    pass


class OracleError(NumericError):
    pass
