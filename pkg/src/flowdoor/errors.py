"""Shared exception types."""


class ConfigError(ValueError):
    """A knob or parameter is outside its allowed range."""


class DimensionError(ValueError):
    """Feature-matrix width does not match what the model was fitted on."""


class SplitError(ValueError):
    """Dataset too small (overall or per class) for the requested split."""


class ParseError(ValueError):
    """A persisted artifact is malformed; message carries path and location."""


class TrainingError(RuntimeError):
    """Training cannot proceed (single-class data, NaN loss, ...)."""
