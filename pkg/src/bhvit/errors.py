"""Exception types shared across the package."""


class BHViTError(Exception):
    """Base class for package errors."""


class ShapeError(BHViTError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(BHViTError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ConfigError(BHViTError, ValueError):
    """A model or training configuration is inconsistent."""
