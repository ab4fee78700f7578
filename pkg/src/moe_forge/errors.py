"""Exception types shared across the package."""


class MoeForgeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MoeForgeError):
    """An array argument has the wrong dimensions for the operation."""


class DataError(MoeForgeError):
    """A dataset is malformed or inconsistent with its declared metadata."""


class ConfigError(MoeForgeError):
    """A run configuration is invalid (unknown keys, bad values, missing paths)."""


class PipelineError(MoeForgeError):
    """A checkpoint or staged run is unusable (version or hash mismatch, missing stage)."""
