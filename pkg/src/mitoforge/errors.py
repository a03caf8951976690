"""Exception hierarchy, mapped onto CLI exit codes (2/3/4)."""


class MitoforgeError(Exception):
    """Base class for all package errors."""


class ConfigError(MitoforgeError):
    """Invalid configuration, parameters, or preconditions. Exit code 2."""


class InputError(MitoforgeError):
    """Missing or malformed input data/files. Exit code 3."""


class NumericError(MitoforgeError):
    """Numeric failure during computation (divergence, empty level set). Exit code 4."""
