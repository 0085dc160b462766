"""Exception hierarchy and shared sentinels.

Every error raised by the package derives from :class:`DisaggError`. The
``exit_code`` attribute drives the command-line exit status: 2 for data
problems, 3 for numerical failures and 1 for usage errors.
"""

from __future__ import annotations

#: Sentinel used for missing raster cells and undefined statistics.
NODATA = -9999.0


class DisaggError(Exception):
    exit_code = 2


class DataError(DisaggError):
    """Input data is missing, inconsistent or unusable."""


class FormatError(DataError):
    """A file could not be parsed."""


class DimensionError(DataError):
    """Array or raster sizes disagree."""


class GeometryError(DataError):
    """A polygon ring is malformed."""


class AlignmentError(DataError):
    """Two rasters do not share the same header."""


class ValidationError(DisaggError):
    """An argument or configuration value is out of range."""


class InternalError(DisaggError):
    """An internal invariant was violated."""

    exit_code = 3


class NumericError(DisaggError):
    """A numerical routine failed (e.g. a non positive definite matrix)."""

    exit_code = 3


class UsageError(DisaggError):
    """Bad command-line arguments or configuration document."""

    exit_code = 1
