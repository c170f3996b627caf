"""Exception types raised across the package."""


class TraceGradError(Exception):
    """Base class for all package errors."""


class DimensionError(TraceGradError, ValueError):
    """Array shapes, channel counts or lengths do not agree."""


class CapacityError(TraceGradError, ValueError):
    """A dense oracle was requested at a size it refuses to allocate."""


class DomainError(TraceGradError, ValueError):
    """A scalar argument lies outside its mathematical domain."""


class DegenerateSparsityError(TraceGradError, RuntimeError):
    """Block-sparse probe generation left some block with no active column."""


class ContextError(TraceGradError, RuntimeError):
    """A stored forward context does not match the layer replaying it."""


class SpecError(TraceGradError, ValueError):
    """A network spec or training config is malformed or shape-incompatible."""


class DatasetMissingError(TraceGradError, FileNotFoundError):
    """Requested training data cannot be located."""
