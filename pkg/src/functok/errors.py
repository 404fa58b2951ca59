class FunctokError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FunctokError):
    """Invalid configuration, missing input file, bad flag. CLI exit code 2."""


class DomainError(FunctokError):
    """A well-formed request that cannot be satisfied. CLI exit code 1."""


class ChecksumError(DomainError):
    pass


class NonFiniteLossError(DomainError):
    pass
