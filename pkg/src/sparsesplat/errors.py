"""Exception types shared across the package."""


class SparseSplatError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(SparseSplatError):
    pass


class EmptySeenSet(SparseSplatError):
    pass


class ZeroQuaternion(SparseSplatError):
    pass


class IndexOutOfRange(SparseSplatError):
    pass


class DegreeTooHigh(SparseSplatError):
    pass


class StaleWorkspace(SparseSplatError):
    pass


class InvalidBetaRange(SparseSplatError):
    pass


class TimestepOutOfRange(SparseSplatError):
    pass


class DegenerateMixture(SparseSplatError):
    pass


class InvalidDepth(SparseSplatError):
    pass


class BehindCamera(SparseSplatError):
    pass


class DimensionMismatch(SparseSplatError):
    pass


class EmptyMask(SparseSplatError):
    pass


class ImageTooSmall(SparseSplatError):
    pass


class ZeroVariance(SparseSplatError):
    pass


class InvalidRange(SparseSplatError):
    pass


class DivergedLoss(SparseSplatError):
    pass


class MalformedFile(SparseSplatError):
    pass
