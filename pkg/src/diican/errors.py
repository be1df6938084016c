"""Exception hierarchy shared by every diican module."""

from __future__ import annotations


class DiicanError(Exception):
    """Base class for all library errors."""


# --- dataset -----------------------------------------------------------------


class MissingFile(DiicanError, FileNotFoundError):
    pass


class MalformedRow(DiicanError, ValueError):
    def __init__(self, path, line: int, reason: str = ""):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: malformed row {reason}".rstrip())


class NonMonotoneTime(DiicanError, ValueError):
    def __init__(self, cycle_index: int):
        self.cycle_index = cycle_index
        super().__init__(f"NonMonotoneTime cycle {cycle_index}")


class EmptyPhase(DiicanError, ValueError):
    def __init__(self, cycle_index: int, phase: str = ""):
        self.cycle_index = cycle_index
        self.phase = phase
        super().__init__(f"EmptyPhase cycle {cycle_index} {phase}".rstrip())


class IoFailure(DiicanError, OSError):
    pass


class InvalidConfig(DiicanError, ValueError):
    pass


# --- features ----------------------------------------------------------------


class ZeroThroughput(DiicanError, ValueError):
    pass


class TooFewSamples(DiicanError, ValueError):
    pass


class IndexOutOfRange(DiicanError, IndexError):
    pass


class EolNotReached(DiicanError, ValueError):
    pass


class DegenerateFeature(DiicanError, ValueError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"degenerate feature {name!r}: max == min on training data")


class TooFewCells(DiicanError, ValueError):
    pass


# --- autodiff ----------------------------------------------------------------


class ShapeMismatch(DiicanError, ValueError):
    pass


class GroupDivisibility(DiicanError, ValueError):
    pass


class BroadcastMismatch(ShapeMismatch):
    pass


class NonScalarOutput(DiicanError, ValueError):
    pass


class InvalidRate(DiicanError, ValueError):
    pass


# --- model / checkpoint --------------------------------------------------------


class LengthMismatch(DiicanError, ValueError):
    pass


class ManifestMismatch(DiicanError, ValueError):
    pass


class TruncatedPayload(DiicanError, ValueError):
    pass


# --- training / metrics -------------------------------------------------------


class InvalidBeta(DiicanError, ValueError):
    pass


class EmptyTrainingSet(DiicanError, ValueError):
    pass


class DivergedLoss(DiicanError, FloatingPointError):
    pass


class ZeroObservedValue(DiicanError, ZeroDivisionError):
    pass


class ZeroDenominator(DiicanError, ZeroDivisionError):
    pass
