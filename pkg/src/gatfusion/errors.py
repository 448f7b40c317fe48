"""Exception types shared across the package."""


class GatFusionError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GatFusionError, ValueError):
    """An array argument has the wrong shape or dtype for an operation."""


class ValidationError(GatFusionError, ValueError):
    """An input violates a documented precondition."""


class ConfigError(GatFusionError, ValueError):
    """A configuration value or combination is invalid."""


class FormatError(GatFusionError, ValueError):
    """A serialized artifact (IDX, CSV, edge list, checkpoint) is malformed."""


class GraphStructureError(GatFusionError, ValueError):
    """A graph violates a structural requirement (e.g. empty softmax segment)."""


class UndefinedMetricError(GatFusionError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
