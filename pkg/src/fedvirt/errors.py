"""Exception types shared across the package."""


class FedVirtError(Exception):
    pass


class ContractViolation(FedVirtError, ValueError):
    """An operation was called outside its documented preconditions."""


class NumericOverflowError(FedVirtError, ArithmeticError):
    """A primitive produced NaN or Inf from finite inputs."""


class ConfigError(FedVirtError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class IDXFormatError(FedVirtError, ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(f"{message} (byte offset {offset})" if offset is not None else message)
        self.offset = offset
