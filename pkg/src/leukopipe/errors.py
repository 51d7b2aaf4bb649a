"""Exception hierarchy for the pipeline.

Every error raised by leukopipe derives from :class:`LeukopipeError` so
callers (and the CLI exit-code mapping) can distinguish pipeline failures
from programming errors.
"""

from __future__ import annotations


class LeukopipeError(Exception):
    """Base class for all pipeline errors."""


# --- dataset ---------------------------------------------------------------

class MissingDirectory(LeukopipeError):
    pass


class UnreadableImage(LeukopipeError):
    def __init__(self, paths):
        self.paths = list(paths)
        super().__init__(f"{len(self.paths)} unreadable image(s): "
                         + ", ".join(str(p) for p in self.paths[:5])
                         + ("..." if len(self.paths) > 5 else ""))


class DuplicatePath(LeukopipeError):
    pass


class EmptyClass(LeukopipeError):
    pass


class AlreadySplit(LeukopipeError):
    pass


class AlreadyCarved(LeukopipeError):
    pass


class AlreadyAugmented(LeukopipeError):
    pass


class FractionOutOfRange(LeukopipeError):
    pass


class IoFailure(LeukopipeError):
    pass


class SchemaVersionMismatch(LeukopipeError):
    pass


class InvariantViolation(LeukopipeError):
    pass


# --- preprocess ------------------------------------------------------------

class UndecodableImage(LeukopipeError):
    pass


class ZeroDimensionImage(LeukopipeError):
    pass


class ZeroStd(LeukopipeError):
    pass


class ShapeMismatch(LeukopipeError):
    pass


# --- augment ---------------------------------------------------------------

class InvalidConfig(LeukopipeError):
    pass


class NoSplit(LeukopipeError):
    pass


class DiskFull(LeukopipeError):
    pass


class ParentMissing(LeukopipeError):
    pass


# --- backbone --------------------------------------------------------------

class UnknownArch(LeukopipeError):
    pass


class WeightsUnavailable(LeukopipeError):
    pass


class CheckpointDigestMismatch(LeukopipeError):
    pass


# --- train -----------------------------------------------------------------

class NonFiniteLogits(LeukopipeError):
    pass


class EmptySplit(LeukopipeError):
    pass


class DivergedLoss(LeukopipeError):
    pass


# --- metrics ---------------------------------------------------------------

class EmptyInput(LeukopipeError):
    pass


class SingleClassOnly(LeukopipeError):
    pass


# --- report ----------------------------------------------------------------

class MalformedLiteratureFile(LeukopipeError):
    pass


# --- pipeline / config -----------------------------------------------------

class ConfigInvalid(LeukopipeError):
    pass


class StagePrereqMissing(LeukopipeError):
    pass
