"""Exception types raised across the package."""


class DistStnError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(DistStnError, ValueError):
    pass


class NonIntegralOutputSize(DistStnError, ValueError):
    pass


class EmptyTensor(DistStnError, ValueError):
    pass


class NotScalar(DistStnError, ValueError):
    pass


class NotOnTape(DistStnError, ValueError):
    pass


class LabelOutOfRange(DistStnError, ValueError):
    pass


class MissingGradient(DistStnError, RuntimeError):
    pass


class DegenerateSize(DistStnError, ValueError):
    pass


class EmptyClass(DistStnError, ValueError):
    pass


class EmptySet(DistStnError, ValueError):
    pass


class TooFewSamples(DistStnError, ValueError):
    pass


class InvalidArg(DistStnError, ValueError):
    pass


class FormatError(DistStnError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
