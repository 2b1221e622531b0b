"""Exception types shared across the package."""


class VlrrError(Exception):
    """Base class for all package errors."""


class DimensionError(VlrrError, ValueError):
    """Tensor shapes disagree along a named axis."""

    def __init__(self, axis: str, expected, got, where: str = ""):
        self.axis = axis
        self.expected = expected
        self.got = got
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}axis '{axis}' expected {expected}, got {got}")


class ParameterError(VlrrError, ValueError):
    """A scalar parameter is outside its admissible range."""


class FormatError(VlrrError, ValueError):
    """A binary file does not follow its declared layout."""


class ConfigError(VlrrError, ValueError):
    """An experiment plan or model configuration is inconsistent."""
