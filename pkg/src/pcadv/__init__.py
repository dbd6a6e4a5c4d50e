"""Unrestricted adversarial point clouds from a label-conditioned tree-GCN GAN."""

from .errors import (CloudFormatError, InvalidConfigError, InvalidInputError, MagicMismatchError,
                     NonFiniteLossError, TruncatedFileError, VersionMismatchError)

__version__ = "0.1.0"

__all__ = [
    "CloudFormatError",
    "InvalidConfigError",
    "InvalidInputError",
    "MagicMismatchError",
    "NonFiniteLossError",
    "TruncatedFileError",
    "VersionMismatchError",
]
