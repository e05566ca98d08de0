"""Exception types shared across the package."""


class QlstmError(Exception):
    """Base class for package errors."""


class ConfigError(QlstmError, ValueError):
    pass


class ValidationError(QlstmError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class NonFiniteError(QlstmError, FloatingPointError):
    pass


class ProvenanceError(QlstmError):
    """Raised when test-partition data reaches a train-only fitting step."""


class StateError(QlstmError, RuntimeError):
    pass


class SkipCycle(QlstmError):
    """A cycle cannot be used; ``reason`` says why."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class TrainingError(QlstmError, RuntimeError):
    pass
