"""Exception hierarchy shared across the package.

Exit codes (used by the CLI): 0 success, 2 validation/configuration,
3 missing prerequisite, 4 numeric failure.
"""


class IdsisError(Exception):
    exit_code = 1


class ConfigurationError(IdsisError):
    exit_code = 2


class ValidationError(IdsisError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class IngestionError(ValidationError):
    pass


class MissingPrerequisiteError(IdsisError):
    exit_code = 3


class StateError(MissingPrerequisiteError):
    """Raised when an operation needs trained/loaded weights that are absent."""


class NumericError(IdsisError):
    exit_code = 4


class QualityGateError(NumericError):
    """A trained component failed its minimum-quality requirement."""


class TrainingDivergenceError(NumericError):
    pass
