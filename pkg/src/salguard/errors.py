"""Exception hierarchy shared across the package."""


class SalguardError(Exception):
    pass


class SequenceLengthError(SalguardError, ValueError):
    pass


class VocabularyError(SalguardError, ValueError):
    pass


class NumericError(SalguardError, ArithmeticError):
    pass


class TapeStateError(SalguardError, RuntimeError):
    """Raised when gradients are requested from a tape with no forward pass."""


class TrainingError(SalguardError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(SalguardError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class ShapeError(SalguardError, ValueError):
    pass


class NoHistoryError(SalguardError, ValueError):
    """The output-position set J is empty for the requested query row."""


class HookError(SalguardError, RuntimeError):
    pass


class InsufficientDataError(SalguardError, ValueError):
    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label


class ConfigError(SalguardError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
