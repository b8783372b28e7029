"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class InvalidRankError(ValueError):
    """Requested low-rank size is impossible for the given dimensions."""


class InvalidInputError(ValueError):
    """A numeric argument violates a documented precondition."""


class MissingAdapterError(KeyError):
    """No adapter registered for the requested task."""


class ProtocolError(RuntimeError):
    """Operation invoked outside the sequential-task protocol."""


class DataError(ValueError):
    """Dataset or task data violates a structural requirement."""


class FormatError(ValueError):
    """Binary file does not conform to the documented layout."""


class ConfigError(ValueError):
    """Configuration value or key is not accepted."""


class DeterminismError(RuntimeError):
    """A closure expected to be deterministic produced differing values."""


class GraphError(RuntimeError):
    """Recorded computation is inconsistent with its parameters."""
