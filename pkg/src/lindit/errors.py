"""Shared exception types. Every failure mode maps to one of these."""


class DimensionError(ValueError):
    """Operand shapes are incompatible. Message names both shapes."""


class ConfigurationError(ValueError):
    """A configuration value is out of its legal range."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class StructuralError(RuntimeError):
    """Two parameter stores disagree on structure (paths, depth, width)."""


class NumericFault(ArithmeticError):
    """A forward pass produced non-finite values."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(CheckpointError):
    """Payload is shorter than the tensor index requires."""


class IndexMismatchError(CheckpointError):
    """Tensor index is internally inconsistent (offsets/shapes/lengths)."""
