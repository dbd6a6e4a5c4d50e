"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class InvalidConfigError(ValueError):
    """Raised for inconsistent attack, training, or CLI configuration."""


class CloudFormatError(InvalidInputError):
    """Base class for on-disk parse failures."""


class MagicMismatchError(CloudFormatError):
    pass


class VersionMismatchError(CloudFormatError):
    pass


class TruncatedFileError(CloudFormatError):
    pass


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss component.

    ``record`` holds the partially filled log record of the offending step.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
