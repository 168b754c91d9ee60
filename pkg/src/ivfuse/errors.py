"""Exception hierarchy shared across the toolkit.

ValidationError maps to CLI exit code 1, anything else to 2.
"""


class ValidationError(ValueError):
    """Bad input data, bad file, or violated precondition."""


class DimensionError(ValidationError):
    """Array shapes incompatible with an operation's contract."""


class ConfigError(ValidationError):
    """Invalid configuration value, unknown key, or bad section."""
