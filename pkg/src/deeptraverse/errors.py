"""Exception taxonomy shared across the package."""


class ConfigError(ValueError):
    """A shape, channel count, or configuration value is inconsistent."""


class InputError(ValueError):
    """Runtime input violates an operation's contract (bad label, non-scalar loss, ...)."""


class FormatError(ValueError):
    """A file or byte stream does not match its declared format."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value and the step was aborted."""
