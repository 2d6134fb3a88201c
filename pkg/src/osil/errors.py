"""Exception types shared across the package."""

from __future__ import annotations


class OsilError(Exception):
    """Base class for all package errors."""


class ConfigError(OsilError, ValueError):
    """Invalid configuration value or degenerate reference."""


class ShapeError(OsilError, ValueError):
    """Input dimensionality does not match the model."""


class NumericError(OsilError, FloatingPointError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, layer: str | None = None, details: dict | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer
        self.details = details or {}


class DatasetError(OsilError):
    """Dataset construction, filtering or file-format failure."""


class SamplingError(OsilError):
    """A partial-trajectory request cannot be satisfied."""


class DataError(OsilError, ValueError):
    """A dataset action lies outside the action space."""


class SupportError(OsilError):
    """KL divergence is infinite because of a support mismatch."""
