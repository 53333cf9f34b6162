"""Exception types shared across the package.

The CLI maps these onto distinct exit codes: usage problems exit 2,
data problems 3, artifact integrity problems 4.
"""

from __future__ import annotations


class EdgenormError(Exception):
    """Base class for package errors."""


class DataError(EdgenormError):
    """Malformed or inconsistent input data (parse and validation failures)."""


class CalibrationError(DataError):
    """Threshold calibration is impossible, e.g. all pairs share one label."""


class IntegrityError(EdgenormError):
    """A persisted artifact failed verification (checksum mismatch, truncation)."""


class EncoderModeError(EdgenormError):
    """A gradient-mode operation was requested on a frozen encoder."""


class TrainingDivergedError(EdgenormError):
    """Training hit a non-finite loss; carries a dump of the offending batch."""

    def __init__(self, message: str, *, epoch: int, step: int, batch: list[str]):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.batch = list(batch)
