"""
Error hierarchy for the WSI pipeline.

Every error carries the process exit code the management commands use:
2 for configuration problems, 3 for data problems, 4 for model problems.
"""


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 2


class DataError(PipelineError):
    exit_code = 3


class ModelError(PipelineError):
    exit_code = 4


# Configuration
class InvalidConfig(ConfigError):
    pass


class SpecInfeasible(ConfigError):
    pass


# Data
class SlideTooSmall(DataError):
    pass


class PatchOutOfBounds(DataError):
    pass


class RatioOutOfRange(DataError):
    pass


class NonDistribution(DataError):
    pass


class EmptyClass(DataError):
    pass


class EmptyInput(DataError):
    pass


class NoPatches(DataError):
    pass


class RaggedInput(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class BadShape(DataError):
    pass


class DegenerateData(DataError):
    pass


class EmptyDomain(DataError):
    pass


class OneClassOnly(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DivisionUndefined(DataError):
    pass


class ScoreOutOfRange(DataError):
    pass


class NegativeCount(DataError):
    pass


class DatasetRuleViolation(DataError):
    """Raised when a training set breaks a per-stage sampling rule."""

    def __init__(self, rule, detail=''):
        self.rule = rule
        message = f"dataset rule violated: {rule}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


# Models
class ShapeIncompatible(ModelError):
    pass


class ModelMissing(ModelError):
    pass
