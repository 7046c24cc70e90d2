"""Exception hierarchy shared by every stage of the pipeline."""


class SpeechStateError(Exception):
    """Base class for all library errors."""


class DimensionError(SpeechStateError, ValueError):
    pass


class ConfigurationError(SpeechStateError, ValueError):
    pass


class EmptyInputError(SpeechStateError, ValueError):
    pass


class LabelError(SpeechStateError, ValueError):
    pass


class DegenerateLabelError(LabelError):
    """Raised when an operation needs both classes but only one is present."""


class DegenerateInputError(SpeechStateError, ValueError):
    pass


class UsageError(SpeechStateError, ValueError):
    pass


class ValidationError(SpeechStateError, ValueError):
    """Malformed file or manifest. ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NumericalRankError(SpeechStateError, ArithmeticError):
    pass


class ArchitectureError(SpeechStateError, ValueError):
    """Derived layer shape is empty. ``layer`` names the failing layer."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingError(SpeechStateError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class OptimizationError(SpeechStateError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class UnsupportedOperationError(SpeechStateError, TypeError):
    pass
