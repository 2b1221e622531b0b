"""Very-low-resolution recognition: numpy CNN kernels, SR pre-training,
partially coupled dual-channel networks and an experiment harness."""

from .errors import ConfigError, DimensionError, FormatError, ParameterError, VlrrError
from .rng import RandomState

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "FormatError",
    "ParameterError",
    "RandomState",
    "VlrrError",
    "__version__",
]
