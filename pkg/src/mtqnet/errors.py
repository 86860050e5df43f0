"""Exception hierarchy shared by every subsystem."""


class MtqError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MtqError):
    """Invalid or inconsistent configuration (bad mode, missing file, ...)."""


class ShapeError(MtqError, ValueError):
    """Array shapes do not line up."""


class InputTooShortError(MtqError, ValueError):
    """Signal shorter than one analysis frame."""


class InsufficientSpeechError(MtqError, ValueError):
    """Too little active speech left for an intelligibility estimate."""


class DegenerateReferenceError(MtqError, ValueError):
    """Reference signal has zero energy."""


class DegenerateDistributionError(MtqError, ValueError):
    """Correlation requested on a zero-variance sequence."""


class EmptyTapeError(MtqError, RuntimeError):
    """backward() called on a graph with nothing recorded."""
