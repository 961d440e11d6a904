"""Exception hierarchy shared by every module."""


class MultiPoseError(Exception):
    """Base class for all engine errors."""


class ShapeError(MultiPoseError, ValueError):
    pass


class NumericError(MultiPoseError, ArithmeticError):
    pass


class GeometryError(ShapeError):
    """Canvas or hidden-state extents that cannot be halved cleanly."""


class ValidationError(MultiPoseError, ValueError):
    pass


# pose JSON
class PoseSchemaError(ValidationError):
    pass


class FrameCountError(ValidationError):
    pass


class DuplicateIdError(ValidationError):
    pass


class NonContiguousIdError(ValidationError):
    pass


class KeypointRangeError(ValidationError):
    pass


# binary tensor / weights files
class TensorFormatError(MultiPoseError, ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class SizeMismatchError(TensorFormatError):
    pass


# prompts
class PromptParseError(ValidationError):
    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class UnknownCharacterError(ValidationError):
    pass


class EmptyPromptError(ValidationError):
    pass


# masks / fusion
class MaskPartitionError(ValidationError):
    pass


class LayoutError(ShapeError):
    pass


class MissingLevelError(ShapeError):
    pass


# diffusion / data
class ScheduleRangeError(MultiPoseError, IndexError):
    pass


class DivergenceError(NumericError):
    pass


class SpawnError(MultiPoseError, RuntimeError):
    pass
