"""Exception types raised by the surfelmap stages."""


class SurfelMapError(Exception):
    """Base class for every error raised by the library."""


class ConfigError(SurfelMapError):
    """Unknown configuration key or unparsable configuration value."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class PlyFormatError(SurfelMapError):
    """A PLY file could not be parsed."""


class PlySchemaError(SurfelMapError):
    """A PLY file parsed but lacks required properties."""


class GmmFormatError(SurfelMapError):
    """A serialized GMM map is truncated, has the wrong magic or holds an invalid record."""


class MapFrozenError(SurfelMapError):
    """Attempt to modify a GMM map after `freeze()`."""


class EmptyInputError(SurfelMapError):
    """An operation that needs at least one element received none."""


class TrainingAborted(SurfelMapError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


class CameraFormatError(SurfelMapError):
    """A camera or intrinsics file is malformed."""
