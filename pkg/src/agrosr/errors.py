"""Exception hierarchy shared by every agrosr module."""

from __future__ import annotations


class AgroSRError(Exception):
    """Base class for all package errors."""

    code = "error"


class InvalidArgumentError(AgroSRError, ValueError):
    code = "invalid-argument"


class InvalidSpecError(AgroSRError, ValueError):
    code = "invalid-spec"


class ResolutionMismatchError(AgroSRError, ValueError):
    """Raised when two resolutions cannot be bridged by an integer factor.

    ``alternatives`` lists the pixel sizes (meters) that are reachable.
    """

    code = "resolution-mismatch"

    def __init__(self, message: str, alternatives: tuple[float, ...] = ()):
        super().__init__(message)
        self.alternatives = tuple(alternatives)


class DegenerateInputError(AgroSRError, ValueError):
    code = "degenerate-input"


class MissingBandError(AgroSRError, KeyError):
    code = "missing-band"

    def __init__(self, band: str):
        super().__init__(band)
        self.band = band

    def __str__(self) -> str:
        return f"missing band {self.band!r}"


class EmptyDatasetError(AgroSRError, ValueError):
    code = "empty-dataset"


class DegenerateLabelsError(AgroSRError, ValueError):
    code = "degenerate-labels"


class SingularSystemError(AgroSRError, ArithmeticError):
    code = "singular-system"


class UnsupportedTaskError(AgroSRError, ValueError):
    code = "unsupported-task"


class InvalidArchitectureError(AgroSRError, ValueError):
    code = "invalid-architecture"


class DivergenceError(AgroSRError, ArithmeticError):
    """Training produced a non-finite loss."""

    code = "divergence"

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
