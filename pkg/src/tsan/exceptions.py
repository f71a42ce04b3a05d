"""Shared exception types."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """An architecture or pipeline configuration is internally inconsistent."""


class FormatError(ValueError):
    """A serialized file (volume, weights, manifest) is malformed."""
