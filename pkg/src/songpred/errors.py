"""Exception types shared across the package."""


class SongpredError(Exception):
    """Base class for all package-specific errors."""


class ManifestError(SongpredError):
    """Manifest file is malformed (bad line, missing field, duplicate id)."""


class EmbeddingFormatError(SongpredError):
    """Embedding or checkpoint file has a bad magic string or version."""


class DimensionError(SongpredError):
    """Declared array dimensions violate the format contract."""


class ConfigError(SongpredError):
    """A configuration file or value is invalid."""


class NumericError(SongpredError):
    """A computation produced non-finite values."""


class UndefinedMetricError(SongpredError):
    """A metric is mathematically undefined for the given input."""
