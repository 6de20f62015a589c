"""Exception hierarchy shared by every fateseg module."""

from __future__ import annotations


class FateSegError(Exception):
    """Base class for all engine errors."""


# volume I/O and geometry
class VolumeIOError(FateSegError):
    pass


class MissingFileError(VolumeIOError, FileNotFoundError):
    pass


class HeaderParseError(VolumeIOError, ValueError):
    pass


class SizeMismatchError(VolumeIOError, ValueError):
    pass


class NonFiniteDataError(VolumeIOError, ValueError):
    pass


class IoFailureError(VolumeIOError, OSError):
    pass


class IndexOutOfRangeError(FateSegError, IndexError):
    pass


class OverlapPolicyViolationError(FateSegError, ValueError):
    pass


class GeometryMismatchError(FateSegError, ValueError):
    pass


# encoder / tensors
class NonFiniteInputError(FateSegError, ValueError):
    pass


class ShapeMismatchError(FateSegError, ValueError):
    pass


# retrieval
class EmptySupportSetError(FateSegError, ValueError):
    pass


class LengthMismatchError(FateSegError, ValueError):
    pass


class ZeroVectorError(FateSegError, ValueError):
    pass


class EmptyLibraryError(FateSegError, ValueError):
    pass


class JTooLargeError(FateSegError, ValueError):
    pass


class FingerprintMismatchError(FateSegError, ValueError):
    pass


class LibraryFormatError(FateSegError, ValueError):
    pass


# memory / attention / decoder
class GridLargerThanMaskError(FateSegError, ValueError):
    pass


class EmptyAnatomicalSetError(FateSegError, ValueError):
    pass


class HeterogeneousShapesError(FateSegError, ValueError):
    pass


class ResidualModeInvalidError(FateSegError, ValueError):
    pass


class MissingAttnError(FateSegError, ValueError):
    pass


# pipeline / evaluation
class LabelUnknownError(FateSegError, KeyError):
    pass


class ConfigError(FateSegError, ValueError):
    pass


class DimMismatchError(FateSegError, ValueError):
    pass


class TooFewVolumesError(FateSegError, ValueError):
    pass


class InvalidAxisValueError(FateSegError, ValueError):
    pass
