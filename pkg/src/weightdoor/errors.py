from __future__ import annotations


class WeightdoorError(Exception):
    """Base class for every error raised by the toolkit.

    ``exit_code`` is what the command-line front end returns when the error
    escapes a subcommand; it always lies in 1..9.
    """

    exit_code = 9


class ConfigurationError(WeightdoorError):
    exit_code = 5


class ShapeError(WeightdoorError):
    """A tensor shape disagrees with what a layer or network expects."""

    exit_code = 4


class NumericError(WeightdoorError):
    exit_code = 6

    def __init__(self, message: str, layer_index: int | None = None) -> None:
        super().__init__(message)
        self.layer_index = layer_index


class TrainingError(WeightdoorError):
    exit_code = 6


class StorageError(WeightdoorError):
    exit_code = 4


class FormatError(StorageError):
    pass


class ValidationError(StorageError):
    pass


class CorruptionError(StorageError):
    pass


class DigestError(WeightdoorError):
    exit_code = 2


class RecognitionError(WeightdoorError):
    exit_code = 7


class EnrollmentError(RecognitionError):
    pass


class CalibrationError(RecognitionError):
    pass


class SimilarityError(RecognitionError):
    pass


class UnknownIdentityError(RecognitionError):
    pass


class EvaluationError(WeightdoorError):
    exit_code = 8


class MetricError(EvaluationError):
    pass


class IngestionError(WeightdoorError):
    exit_code = 3


class ParseError(IngestionError):
    pass
