"""Exception hierarchy shared by every endp module."""


class EnDPError(Exception):
    """Base class for all library errors."""


# gaussian core
class NotSymmetric(EnDPError, ValueError):
    pass


class NotFactorizable(EnDPError, ValueError):
    pass


class NonPositivePriorVariance(EnDPError, ValueError):
    pass


class EnsembleTooSmall(EnDPError, ValueError):
    pass


# layers
class DimensionMismatch(EnDPError, ValueError):
    pass


class GeometryMismatch(EnDPError, ValueError):
    pass


class UnknownActivation(EnDPError, KeyError):
    pass


class EmptyList(EnDPError, ValueError):
    pass


# objective / training
class LabelOutOfRange(EnDPError, IndexError):
    pass


class NonFiniteGradient(EnDPError, FloatingPointError):
    pass


class CheckpointError(EnDPError):
    pass


# data io
class BadMagic(EnDPError, ValueError):
    pass


class TruncatedFile(EnDPError, ValueError):
    pass


class CountMismatch(EnDPError, ValueError):
    pass


class SizeNotMultipleOfRecord(EnDPError, ValueError):
    pass


class SubsetTooLarge(EnDPError, ValueError):
    pass


class ConfigError(EnDPError, ValueError):
    pass
