"""Exception taxonomy shared by all pipeline stages."""


class MirageError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MirageError):
    """Input violated a documented precondition or invariant."""


class ImageIOError(MirageError):
    """An image file could not be read, decoded, or written."""


class TensorFormatError(MirageError):
    """A raw tensor file had a bad magic, version, or payload length."""


class ParseError(MirageError):
    """A backend response could not be parsed into structured records."""

    def __init__(self, message, raw_text=""):
        super().__init__(message)
        self.raw_text = raw_text


class TransportError(MirageError):
    """A remote backend failed after exhausting retries."""


class CalibrationError(MirageError):
    """Threshold calibration is undefined for the given references."""


class UndefinedMetricError(MirageError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class ConfigurationError(MirageError):
    """Required configuration is missing or inconsistent."""


class TrainingError(MirageError):
    """Segmenter training diverged or produced non-finite loss."""
