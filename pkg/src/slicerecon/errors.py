"""Exception hierarchy. Each category carries the CLI exit code it maps to."""


class SliceReconError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(SliceReconError, ValueError):
    exit_code = 2
    category = "config"


class MissingInputError(SliceReconError, FileNotFoundError):
    exit_code = 3
    category = "missing-input"


class RegimeViolationError(SliceReconError):
    """A non-healthy scan reached the training split."""

    exit_code = 4
    category = "regime-violation"


class DataError(SliceReconError, ValueError):
    exit_code = 5
    category = "data"


class FormatError(DataError):
    category = "format"


class DimensionError(DataError):
    category = "dimension"


class BoundsError(DataError, IndexError):
    category = "bounds"


class ShapeError(SliceReconError, ValueError):
    exit_code = 5
    category = "shape"


class DomainError(SliceReconError, ValueError):
    exit_code = 5
    category = "domain"


class DivergenceError(SliceReconError, RuntimeError):
    """Training produced a non-finite loss."""

    exit_code = 6
    category = "divergence"

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class ScoringError(SliceReconError, ValueError):
    exit_code = 7
    category = "scoring"


class SelectionError(ScoringError):
    category = "selection"


class EvaluationError(SliceReconError, ValueError):
    exit_code = 7
    category = "evaluation"


class OutputExistsError(SliceReconError, FileExistsError):
    exit_code = 8
    category = "output-exists"
