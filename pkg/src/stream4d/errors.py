"""Exception hierarchy.

Errors raised while processing a particular frame can carry a
``(timestamp, sensor)`` context; :meth:`ReconstructionError.at` attaches it.
"""

from __future__ import annotations


class ReconstructionError(Exception):
    """Base class for all package errors."""

    exit_code = 1

    def __init__(self, message: str = "", *, context: tuple | None = None):
        super().__init__(message)
        self.message = message
        self.context = context

    def at(self, timestamp, sensor) -> "ReconstructionError":
        self.context = (timestamp, sensor)
        return self

    def __str__(self) -> str:
        if self.context is None:
            return self.message
        t, c = self.context
        where = f"sensor={c}" if t is None else f"t={t}, sensor={c}"
        return f"[{where}] {self.message}"


class ConfigError(ReconstructionError):
    exit_code = 2


class DataError(ReconstructionError):
    exit_code = 3


class NumericalError(ReconstructionError):
    exit_code = 4


# geometry
class DegenerateGeometry(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


# memory pool
class DimensionMismatch(DataError, ValueError):
    pass


class OutOfOrderTimestamp(DataError, ValueError):
    pass


# flow predictor
class SequenceTooShort(DataError):
    pass


# losses / metrics
class EmptyMask(NumericalError):
    pass


class EmptyCloud(NumericalError):
    pass


class NonPositiveDepth(DataError):
    pass


# file formats
class MalformedManifest(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class BadDimensions(DataError):
    pass
