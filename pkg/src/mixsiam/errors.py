"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value (CLI maps this to exit code 2)."""


class ShapeError(ValueError):
    """Tensor dimension mismatch; message names both shapes."""


class ParseError(ValueError):
    """Malformed dataset file; message carries the byte offset."""


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; message names the first offending parameter."""
