"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by miniseg itself."""


class ShapeError(EngineError):
    """Tensor or parameter dimensions violate an operation's contract."""


class ConfigError(EngineError):
    """A network configuration or input resolution breaks a validation rule."""


class FormatError(EngineError):
    """A binary artifact (model file, LUT file, image file) is malformed."""


class StateError(EngineError):
    """An operation was invoked on an object in an unusable state."""


class DivergenceError(EngineError):
    """Training produced a non-finite loss."""
