"""Exception hierarchy. Every error raised on purpose by this package derives
from ``FSNetError`` so the CLI can turn it into a nonzero exit code."""


class FSNetError(Exception):
    pass


class ShapeMismatch(FSNetError, ValueError):
    pass


# dataset preparation
class DetectionFailed(FSNetError):
    pass


class DegenerateHull(FSNetError):
    pass


class BadDimensions(FSNetError, ValueError):
    pass


class SegmentationUnavailable(FSNetError):
    pass


class PreparationFailed(FSNetError):
    pass


# model / training
class NonPositiveSigma(FSNetError, ValueError):
    pass


class InsufficientIdentities(FSNetError):
    pass


class NonFiniteLoss(FSNetError):
    def __init__(self, message, metrics=None, dump_path=None):
        super().__init__(message)
        self.metrics = metrics or {}
        self.dump_path = dump_path


class CheckpointMismatch(FSNetError):
    pass


# evaluation
class ImageTooSmall(FSNetError, ValueError):
    pass


# configuration
class ParseError(FSNetError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(FSNetError, ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))
