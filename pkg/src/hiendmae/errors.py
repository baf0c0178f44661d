"""Exception hierarchy shared across the package."""


class HiEndMAEError(Exception):
    """Base class for all package errors."""


# volume_io
class VolumeError(HiEndMAEError):
    pass


class BadMagic(HiEndMAEError):
    """File does not start with the expected magic bytes (RVOL or HEMC)."""


class TruncatedFile(VolumeError):
    pass


class UnsupportedDtype(VolumeError):
    pass


class DimOverflow(VolumeError):
    pass


class BadRange(VolumeError, ValueError):
    pass


class OutOfBounds(VolumeError, IndexError):
    pass


class BadSpec(VolumeError, ValueError):
    pass


class IoFailure(VolumeError, OSError):
    pass


# autodiff / shapes
class ShapeMismatch(HiEndMAEError, ValueError):
    pass


class NotScalar(HiEndMAEError, ValueError):
    pass


class NonFinite(HiEndMAEError, FloatingPointError):
    pass


# tokenizer
class IndivisibleDims(HiEndMAEError, ValueError):
    pass


class BadRatio(HiEndMAEError, ValueError):
    pass


class BadDim(HiEndMAEError, ValueError):
    pass


class IndexOutOfRange(HiEndMAEError, IndexError):
    pass


# decoder / trainer
class EmptyMask(HiEndMAEError, ValueError):
    pass


class NonFiniteGrad(NonFinite):
    pass


class NonFiniteLoss(NonFinite):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class DataEmpty(HiEndMAEError):
    pass


class CheckpointError(HiEndMAEError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ShapeMismatchOnLoad(CheckpointError):
    pass


class ZeroMatrix(HiEndMAEError, ValueError):
    pass


class ConfigError(HiEndMAEError, ValueError):
    pass
