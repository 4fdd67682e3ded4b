"""Exception hierarchy.

Everything raised because of bad input data derives from :class:`DataError`;
the command-line front end maps that family to exit status 2.
"""


class DataError(ValueError):
    """Input data violates a documented precondition."""


class RasterFormatError(DataError):
    """Malformed NTLR payload."""


class AsciiGridError(DataError):
    """Malformed ESRI ASCII grid, with the 1-based position of the problem."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SingularFitError(DataError):
    """Calibration fit has fewer than three distinct abscissae."""


class InsufficientLitAreaError(DataError):
    """Tile sampler ran out of attempts before finding enough lit tiles."""


class UndefinedCorrelationError(DataError):
    """Correlation requested for an image with zero variance."""


class ShapeError(DataError):
    """Tensor shape violates an operator or model-stage contract."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class CheckpointError(DataError):
    """Corrupt, truncated, or inconsistent checkpoint payload."""


class ConfigError(DataError):
    """Invalid run configuration (unknown key, bad value)."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
