"""Exception hierarchy.

Every error carries a short machine-readable ``kind`` and the exit code the
command line maps it to (2 config, 3 data, 4 numerical).
"""


class PupilkitError(Exception):
    kind = "error"
    exit_code = 3


class ConfigError(PupilkitError):
    kind = "config-error"
    exit_code = 2


class InvalidParameter(PupilkitError, ValueError):
    kind = "invalid-parameter"
    exit_code = 2


class InvalidInput(PupilkitError, ValueError):
    kind = "invalid-input"


class DomainError(PupilkitError, ValueError):
    kind = "domain-error"


class InsufficientData(PupilkitError):
    kind = "insufficient-data"


class MissingData(PupilkitError):
    kind = "missing-data"


class CalibrationError(PupilkitError):
    kind = "calibration-error"


class DegenerateCalibration(PupilkitError):
    kind = "degenerate-calibration"
    exit_code = 4


class FitFailure(PupilkitError):
    kind = "fit-failure"
    exit_code = 4


class InvalidModel(PupilkitError):
    kind = "invalid-model"


class UnrecoverableTrace(PupilkitError):
    kind = "unrecoverable-trace"


class AlignmentError(PupilkitError):
    kind = "alignment-error"


class InvalidInterval(PupilkitError):
    kind = "invalid-interval"


class DegenerateConfiguration(PupilkitError):
    kind = "degenerate-configuration"
    exit_code = 4


class RescaleError(PupilkitError):
    kind = "rescale-error"
    exit_code = 4


class UndefinedStatistic(PupilkitError):
    kind = "undefined-statistic"
    exit_code = 4


class NonInvertibleModel(PupilkitError):
    kind = "non-invertible-model"
    exit_code = 4


class TrainingError(PupilkitError):
    kind = "training-error"
