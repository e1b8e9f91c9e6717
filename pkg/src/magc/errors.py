"""Exception hierarchy shared across the codec."""


class MagcError(Exception):
    """Base class for all package errors."""


class ShapeError(MagcError):
    """Tensor or raster dimensions violate an operation's contract."""


class NonFiniteError(MagcError):
    """NaN or Inf encountered where finite values are required."""


class FormatError(MagcError):
    """Malformed file: bad magic, version, length, or checksum."""


class ModelMismatchError(MagcError):
    """Bitstream was produced by a different model checkpoint."""


class NumericError(MagcError):
    """Numeric failure during training or sampling (divergence, NaN loss)."""


class UsageError(MagcError):
    """Invalid command-line usage."""
