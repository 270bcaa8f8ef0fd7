"""Exception taxonomy shared by all loracanvas modules."""


class LoracanvasError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LoracanvasError, ValueError):
    """Operand shapes are incompatible with the requested kernel."""


class ArgumentError(LoracanvasError, ValueError):
    """A scalar argument is outside its documented range."""


class LineageError(LoracanvasError, ValueError):
    """Gradient requested with respect to a tensor that was never traced."""


class NumericError(LoracanvasError, ArithmeticError):
    """A numeric result stopped being finite (NaN or infinity)."""


class FormatError(LoracanvasError, ValueError):
    """A binary container file has a bad magic string or version."""


class DataError(LoracanvasError, ValueError):
    """A container payload is truncated or holds non-finite values."""


class ValidationError(LoracanvasError, ValueError):
    """A loaded asset violates its structural invariants."""


class EmptyMaskError(LoracanvasError, ValueError):
    """A layout box rasterizes to zero pixels at the requested resolution."""


class ConfigurationError(LoracanvasError, ValueError):
    """A run configuration is inconsistent or references missing assets."""


class DegenerateLatentError(LoracanvasError, ValueError):
    """A latent channel has no variance and cannot be standardized."""
