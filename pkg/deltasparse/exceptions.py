"""
Custom exceptions.
"""


class DeltaSparseError(RuntimeError):
    """
    Custom exception classes sent out by deltasparse module.
    """
    pass


class ShapeError(DeltaSparseError):
    """
    Raised when matrix or vector dimensions do not agree.
    """
    pass


class ConfigError(DeltaSparseError):
    """
    Raised when a tunable or a configuration value is not valid.
    """
    pass


class ContractError(DeltaSparseError):
    """
    Raised when an input violates a precondition of an operation,
    such as non-finite entries or a fully masked softmax row.
    """
    pass


class BoundsError(DeltaSparseError):
    """
    Custom exception classes sent out by deltasparse.matmul submodule
    when a position is out of the encoded range.
    """
    pass


class CacheStateError(DeltaSparseError):
    """
    Custom exception classes sent out by deltasparse.cache submodule.
    """
    pass


class TensorFileError(DeltaSparseError):
    """
    Custom exception classes sent out by deltasparse.tensorfile submodule.
    """
    pass


class TensorMagicError(TensorFileError):
    """
    The file does not start with the expected magic bytes.
    """
    pass


class TensorVersionError(TensorFileError):
    """
    The file format version is not supported.
    """
    pass


class TensorSizeError(TensorFileError):
    """
    The payload length does not match the header dimensions.
    """
    pass


class TensorContentError(TensorFileError):
    """
    The payload holds NaN or Inf entries.
    """
    pass


class InvariantViolation(DeltaSparseError):
    """
    Raised by the harness when a runtime invariant check fails.
    """
    pass
