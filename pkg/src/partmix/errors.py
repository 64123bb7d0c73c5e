"""Exception types shared across partmix modules."""


class PartmixError(Exception):
    """Base class for all partmix-specific errors."""


class SizedInputError(PartmixError, ValueError):
    """Input raster or grid is too small for the requested operation."""


class WindowBoundsError(PartmixError, IndexError):
    """A requested window or lookup lies outside the grid."""


class InvalidAnnotationError(PartmixError, ValueError):
    """A bounding box or part annotation is degenerate or out of bounds."""


class DataError(PartmixError, ValueError):
    """Training data is unusable (non-finite features, single class, ...)."""


class OrderingError(PartmixError, ValueError):
    """Sample sizes for partitioned sampling are not strictly decreasing."""


class ProvenanceError(PartmixError, ValueError):
    """Partitions were not derived from the supplied cluster tree."""


class ValidationError(PartmixError, ValueError):
    """A user-supplied structure (merge map, config) fails validation."""


class OracleGuardError(PartmixError, RuntimeError):
    """A brute-force oracle was invoked beyond its test-scale guard."""


class UndefinedMetricError(PartmixError, ValueError):
    """A metric (e.g. AP with zero positives) is undefined for the input."""


class ModelFormatError(PartmixError, ValueError):
    """A serialized model file is truncated, unversioned, or unknown."""
