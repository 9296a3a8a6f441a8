"""Exception hierarchy."""


class DawnFMError(Exception):
    pass


class ShapeError(DawnFMError, ValueError):
    pass


class ParameterError(DawnFMError, ValueError):
    pass


class ConfigError(DawnFMError, ValueError):
    pass


class StateError(DawnFMError, RuntimeError):
    pass


class TrainingError(DawnFMError, RuntimeError):
    pass


class InferenceError(DawnFMError, RuntimeError):
    pass


class FormatError(DawnFMError, ValueError):
    """Malformed file content (IDX, DWNT, checkpoint)."""
