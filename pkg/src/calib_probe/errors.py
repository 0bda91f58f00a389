"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class CalibProbeError(Exception):
    exit_code = 1


class ConfigError(CalibProbeError, ValueError):
    exit_code = 2


class DataError(CalibProbeError):
    exit_code = 3


class DegeneracyError(CalibProbeError, ArithmeticError):
    exit_code = 4


class GimbalLockError(DegeneracyError):
    pass


class DivergenceError(DegeneracyError):
    pass


class RansacFailure(DegeneracyError):
    pass


class ConvergenceWarning(RuntimeWarning):
    pass


class DegenerateFitWarning(RuntimeWarning):
    pass
