"""Exception hierarchy shared across the toolkit.

Every error that the CLI maps to a distinct exit code lives here so the
mapping stays in one place (see cli.EXIT_CODES).
"""


class StainforgeError(Exception):
    """Base class for all toolkit errors."""


class DegenerateStainsError(StainforgeError):
    """H and E color vectors are (nearly) parallel; the residual direction
    is ill-conditioned."""


class SingularMatrixError(StainforgeError):
    """Stain matrix failed the condition-number guard and cannot be
    inverted reliably."""


class EmptySampleError(StainforgeError):
    """Objective evaluated on zero pixels."""


class InsufficientTissueError(StainforgeError):
    """Too few tissue pixels to fit a stain model."""


class EmptyDatasetError(StainforgeError):
    """Dataset scan matched zero images."""


class SingleClassError(StainforgeError):
    """Operation needs both benign and malignant records present."""


class EmptyPredictionsError(StainforgeError):
    """Prediction file contains no data rows."""


class PredictionParseError(StainforgeError):
    """Prediction CSV row failed validation.

    Carries the 1-based line number of the offending row.
    """

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
