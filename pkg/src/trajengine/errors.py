"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class DepthBehindCamera(EngineError):
    pass


class NonPositiveDepth(EngineError):
    pass


class DimensionMismatch(EngineError):
    pass


class NoVisibleVertices(EngineError):
    pass


class Diverged(EngineError):
    pass


class InsufficientConstraints(EngineError):
    pass


class TooFewValidCells(EngineError):
    pass


class NonFiniteObjective(EngineError):
    pass


class NoValidFrames(EngineError):
    pass


class InsufficientOverlap(EngineError):
    pass


class FrameMismatch(EngineError):
    pass


class OutOfRange(EngineError):
    pass


class DegenerateConfiguration(EngineError):
    pass


class TimestampMismatch(EngineError):
    pass


class ShapeMismatch(EngineError):
    pass


class TooShort(EngineError):
    pass


class EmptyScene(EngineError):
    pass


class FormatError(EngineError):
    """Malformed file or manifest."""
