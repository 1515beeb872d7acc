"""Exception types raised across the package."""


class VitbisError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(VitbisError, ValueError):
    pass


class NonIntegralOutput(ShapeMismatch):
    """Convolution geometry does not produce an integral output extent."""


class NonScalarOutput(VitbisError, ValueError):
    pass


class BiasGridMismatch(ShapeMismatch):
    """Token count is not a square window while relative bias is enabled."""


class ConfigMismatch(VitbisError, ValueError):
    pass


class DomainError(VitbisError, ValueError):
    pass


class InvalidSpec(VitbisError, ValueError):
    pass


class CropTooLarge(VitbisError, ValueError):
    pass


class CorruptFile(VitbisError, IOError):
    pass


class VersionMismatch(VitbisError, IOError):
    pass


class NonFiniteGradient(VitbisError, FloatingPointError):
    pass


class NonFiniteLoss(VitbisError, FloatingPointError):
    pass
