"""Exception hierarchy shared by every WindowQuant module."""


class WindowQuantError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(WindowQuantError, ValueError):
    """Operand shapes or lengths do not agree."""


class DegenerateEmbeddingError(WindowQuantError, ValueError):
    """A vector with zero L2 norm was used where a direction is required."""


class QuantizationError(WindowQuantError, ValueError):
    """Invalid quantization input, code or packed buffer."""


class SearchError(WindowQuantError, ValueError):
    """Invalid bit-width search input (thresholds, window plan, batch)."""


class CacheError(WindowQuantError):
    """The segmented KV cache was built or used inconsistently."""


class ConfigError(WindowQuantError):
    """A run configuration could not be parsed or validated."""


class ResourceCapError(WindowQuantError):
    """A run would exceed the configured token cap."""


class NonFiniteError(WindowQuantError, ValueError):
    """A matrix or vector holds NaN or infinite entries."""
