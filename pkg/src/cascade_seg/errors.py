"""Exception hierarchy shared by every module of the package."""


class CascadeSegError(Exception):
    """Base class for all package errors."""


# volume I/O ---------------------------------------------------------------

class MvolError(CascadeSegError):
    pass


class MissingFile(MvolError, FileNotFoundError):
    pass


class BadMagic(MvolError):
    pass


class UnsupportedVersion(MvolError):
    pass


class DimensionOverflow(MvolError):
    pass


class TruncatedPayload(MvolError):
    pass


class DegenerateVolume(CascadeSegError):
    pass


class CoordOutOfVolume(CascadeSegError, IndexError):
    pass


class EvenPatchSize(CascadeSegError, ValueError):
    pass


# engine -------------------------------------------------------------------

class ShapeMismatch(CascadeSegError, ValueError):
    pass


class SingleSampleTrainBatch(CascadeSegError, ValueError):
    pass


class NonFiniteInput(CascadeSegError, ValueError):
    pass


class NoForwardState(CascadeSegError, RuntimeError):
    pass


class CheckpointError(CascadeSegError):
    pass


# training -----------------------------------------------------------------

class MissingFlairChannel(CascadeSegError):
    pass


class MissingMask(CascadeSegError):
    pass


class NoPositives(CascadeSegError):
    pass


class SingleClassData(CascadeSegError):
    pass


class EmptyPatchSet(CascadeSegError):
    pass


class UntrainedNetwork(CascadeSegError):
    pass


class SamplingShortfallWarning(UserWarning):
    """Fewer negatives were available than the balanced draw asked for."""


class HardNegativeTopUpWarning(UserWarning):
    """Misclassified negatives ran out; highest-scoring negatives filled the gap."""


# inference / metrics ------------------------------------------------------

class ChannelMismatch(CascadeSegError):
    pass


class NoMask(CascadeSegError):
    pass


class EmptyGroundTruth(CascadeSegError, ZeroDivisionError):
    pass


class UndefinedRatio(CascadeSegError, ZeroDivisionError):
    pass


class DegenerateVariance(CascadeSegError, ValueError):
    pass


class PlacementFailure(CascadeSegError):
    pass


class ConfigError(CascadeSegError):
    pass
