"""Exception types raised across the package."""


class GestaltError(Exception):
    """Base class for all package errors."""


# imagecore
class MismatchedCellSizes(GestaltError, ValueError):
    pass


class BadCellCount(GestaltError, ValueError):
    pass


class IndexOutOfRange(GestaltError, IndexError):
    pass


class OutOfBounds(GestaltError, ValueError):
    pass


class AllWhite(GestaltError, ValueError):
    pass


class DimensionMismatch(GestaltError, ValueError):
    pass


class LengthMismatch(GestaltError, ValueError):
    pass


# tensornet
class ShapeMismatch(GestaltError, ValueError):
    pass


class NonFiniteValue(GestaltError, FloatingPointError):
    pass


class NoCachedForward(GestaltError, RuntimeError):
    pass


class TooManyParameters(GestaltError, ValueError):
    pass


# inpaint
class ShapeUnsupported(GestaltError, ValueError):
    pass


class DegenerateMask(GestaltError, ValueError):
    pass


class NoSourcePatch(GestaltError, ValueError):
    pass


class EmptyBatch(GestaltError, ValueError):
    pass


# train
class EmptyCorpus(GestaltError, ValueError):
    pass


class NonFiniteLoss(GestaltError, FloatingPointError):
    pass


class CheckpointError(GestaltError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


# problems
class CannotSeparate(GestaltError, ValueError):
    pass


class BadManifest(GestaltError, ValueError):
    pass


class MissingImageFile(GestaltError, FileNotFoundError):
    pass


class InconsistentChoiceCount(GestaltError, ValueError):
    pass


# solvereval
class BackendShapeError(GestaltError, ValueError):
    pass


class UnlabeledProblem(GestaltError, ValueError):
    pass


class EmptySet(GestaltError, ValueError):
    pass


class TotalNotInNorms(GestaltError, KeyError):
    pass
