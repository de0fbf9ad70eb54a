"""
errors.py

Exception and warning hierarchy shared by every weakseg module.

All errors derive from WeaksegError so the CLI can report them uniformly.
Errors that describe a bad argument also derive from ValueError, which keeps
them catchable the way numpy/scipy callers expect.

Recoverable conditions (a dropped feature, a contour that ran out of region,
an empty liver prediction) are not errors: they are emitted as warnings of
the WeaksegWarning family and logged.
"""


class WeaksegError(Exception):
    """Root of all weakseg errors."""


class IoError(WeaksegError, OSError):
    """A file could not be read or written."""


# ______________________________________________________________________________
# NIfTI parsing


class NiftiError(WeaksegError):
    """Base class for every failure of the NIfTI-1 parser."""


class BadMagic(NiftiError):
    """Magic string is neither "n+1\\0" nor "ni1\\0"."""


class InvalidHeader(NiftiError):
    """Header fields are inconsistent (sizeof_hdr, dims, pixdim, offset)."""


class UnsupportedDatatype(NiftiError):
    """Datatype code outside uint8/int16/int32/float32/float64."""


class TruncatedFile(NiftiError):
    """File is shorter than the header or the declared voxel data."""


class NonFinite(NiftiError):
    """A NaN or Inf voxel was encountered after scaling."""


# ______________________________________________________________________________
# Clinical CSV


class ClinicalCsvError(WeaksegError):
    """Base class for clinical table parsing failures."""


class MissingColumn(ClinicalCsvError):
    """A schema column is absent from the header row."""


class UnknownColumn(ClinicalCsvError):
    """The header carries a column outside the schema."""


class UnparsableCell(ClinicalCsvError):
    """A cell does not decode under the codebook."""

    def __init__(self, row, column, value, reason=None):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: {reason or f'cannot parse {value!r}'}")


# ______________________________________________________________________________
# Argument errors


class ShapeMismatch(WeaksegError, ValueError):
    """Two grids that must be aligned are not."""


class KindMismatch(WeaksegError, ValueError):
    """A Volume carries the wrong intensity kind for the operation."""


class EmptyMask(WeaksegError, ValueError):
    """An operation needs at least one foreground voxel."""


class EmptyRegion(WeaksegError, ValueError):
    """The weak-loss region holds no voxel."""


class OutOfRange(WeaksegError, ValueError):
    """A value lies outside its admissible interval."""


class DimMismatch(WeaksegError, ValueError):
    """Feature length does not match the parameter vector."""


class InvalidWeights(WeaksegError, ValueError):
    """Loss weights are negative or all zero."""


class InvalidConfig(WeaksegError, ValueError):
    """A configuration key or value is not acceptable."""


class TooFewSamples(WeaksegError, ValueError):
    """Not enough records for the requested fit or cross-validation."""


class InfeasibleSpec(WeaksegError, ValueError):
    """A phantom specification cannot be realised."""


class NonFiniteGradient(WeaksegError, ArithmeticError):
    """Training produced a NaN/Inf gradient."""


class InvalidParams(WeaksegError, ValueError):
    """A serialized parameter blob is malformed."""


# ______________________________________________________________________________
# Warnings


class WeaksegWarning(UserWarning):
    """Root of weakseg warnings."""


class DegenerateDesignWarning(WeaksegWarning):
    """A constant feature was dropped from a linear fit."""


class DegenerateRegionsWarning(WeaksegWarning):
    """The active contour lost its inside or outside region."""


class EmptyLiverPredictionWarning(WeaksegWarning):
    """The global branch predicted no liver; the local branch was skipped."""
