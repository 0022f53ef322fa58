"""Exception hierarchy.

Every error raised by the library derives from :class:`TonelError`.  The
CLI maps the three branches to exit codes: :class:`ConfigError` -> 2,
:class:`DataError` -> 3, :class:`NumericalError` -> 4.
"""

from __future__ import annotations


class TonelError(Exception):
    pass


class ConfigError(TonelError):
    pass


class DataError(TonelError):
    pass


class NumericalError(TonelError):
    pass


# -- file formats ---------------------------------------------------------

class FormatError(DataError):
    """Malformed on-disk artifact."""


class BadMagic(FormatError):
    pass


class BadHeader(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class NonFiniteValue(DataError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class IoFailure(DataError):
    pass


# -- shapes / labels ------------------------------------------------------

class ShapeMismatch(DataError, ValueError):
    pass


class IdMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class QueryMismatch(DataError):
    pass


class BadLabel(DataError, ValueError):
    pass


class MissingLabels(DataError):
    pass


class MissingText(DataError):
    pass


class EmptyVector(DataError, ValueError):
    pass


class NonFiniteInput(DataError, ValueError):
    pass


class KTooLarge(DataError, ValueError):
    pass


class KTooSmall(DataError, ValueError):
    pass


# -- numerics -------------------------------------------------------------

class StaleCache(NumericalError):
    pass


class DivergedTraining(NumericalError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class UnknownDevice(ConfigError):
    pass
