"""Exception hierarchy shared by every stage of the pipeline."""


class AdapamError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(AdapamError, ValueError):
    exit_code = 2


class ShapeError(AdapamError, ValueError):
    exit_code = 2


class ArgumentError(AdapamError, ValueError):
    exit_code = 2


class NumericError(AdapamError, ArithmeticError):
    exit_code = 4


class StagedDependencyError(AdapamError):
    """Raised when an upstream pipeline stage has not been completed."""

    exit_code = 3

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"missing upstream stage: {stage}")


class TrainingFailure(AdapamError):
    """A training run finished but missed its quality gate."""

    exit_code = 4

    def __init__(self, message, metrics=None):
        self.metrics = dict(metrics or {})
        super().__init__(f"{message} (metrics: {self.metrics})")


class IntegrityError(AdapamError):
    exit_code = 5
