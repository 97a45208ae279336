"""Exception hierarchy shared by every segqc module."""

from __future__ import annotations


class SegQCError(Exception):
    """Base class for all segqc errors."""


class ShapeMismatch(SegQCError, ValueError):
    pass


class InvalidVolume(SegQCError, ValueError):
    """Volume contents violate a type invariant (label range, value range...)."""


class ProbRequired(SegQCError, ValueError):
    """The operation needs probability stacks but only label volumes were given."""


class InsufficientSamples(SegQCError, ValueError):
    pass


class CountOutOfRange(SegQCError, ValueError):
    pass


# -- SVOL container ---------------------------------------------------------


class SvolError(SegQCError, ValueError):
    pass


class BadMagic(SvolError):
    pass


class TruncatedPayload(SvolError):
    pass


class TrailingBytes(SvolError):
    """Payload is longer than the header declares."""


class InvalidHeaderField(SvolError):
    pass


# -- cohort CSV --------------------------------------------------------------


class CohortError(SegQCError, ValueError):
    pass


class MissingColumn(CohortError):
    pass


class UnparseableField(CohortError):
    def __init__(self, row: int, column: str, value: str, reason: str = ""):
        self.row = row
        self.column = column
        self.value = value
        msg = f"row {row}: cannot parse {column}={value!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


# -- evaluation / statistics ------------------------------------------------


class DegenerateInput(SegQCError, ValueError):
    pass


class EmptyInput(SegQCError, ValueError):
    pass


class OutOfRange(SegQCError, ValueError):
    pass


class GeometryOverflow(SegQCError, ValueError):
    pass


class RegressionError(SegQCError, ValueError):
    pass


class RankDeficient(RegressionError):
    pass


class InsufficientData(RegressionError):
    pass
