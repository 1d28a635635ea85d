class FrechetError(Exception):
    """Base error for the library."""


class InputValidationError(FrechetError, ValueError):
    """Inputs violate an operation's contract (parameters, shapes, ranges)."""


class InfeasibleError(FrechetError):
    """A requested construction does not exist for the given margins or grid."""


class ConfigError(FrechetError):
    """A run configuration could not be parsed or validated."""
