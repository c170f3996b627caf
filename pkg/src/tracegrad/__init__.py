"""Memory-light convolution gradients from randomized trace estimation."""
from .errors import (CapacityError, ContextError, DatasetMissingError, DegenerateSparsityError,
                     DimensionError, DomainError, SpecError, TraceGradError)
from .probing import BlockSparsity, ProbeMatrix, ProbeSeed
from .tensor import ChannelTensor, ImageShape, ShiftOffset

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ContextError", "DatasetMissingError", "DegenerateSparsityError",
    "DimensionError", "DomainError", "SpecError", "TraceGradError", "BlockSparsity",
    "ProbeMatrix", "ProbeSeed", "ChannelTensor", "ImageShape", "ShiftOffset", "__version__",
]
