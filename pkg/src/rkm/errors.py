"""Exception hierarchy shared by every rkm module."""


class RKMError(Exception):
    """Base class for errors raised by the rkm package."""


class ShapeError(RKMError, ValueError):
    """Operand shapes do not fit the operation."""

    def __init__(self, op: str, **shapes: tuple[int, ...]):
        described = ", ".join(f"{name}={shape}" for name, shape in shapes.items())
        super().__init__(f"{op}: incompatible shapes ({described})")
        self.op = op
        self.shapes = shapes


class DivergenceError(RKMError, FloatingPointError):
    """A state or loss became non-finite."""


class DatasetFormatError(RKMError, ValueError):
    """A dataset file could not be parsed."""


class CheckpointError(RKMError, ValueError):
    """A checkpoint file is malformed, truncated or of an unknown version."""
