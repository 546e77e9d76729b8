"""
Exception hierarchy for the disparity refiner.

Every error carries the process exit code the CLI reports for it:
    0 success, 2 input error, 3 config/contract error, 4 numeric divergence.
"""


class RefinerError(Exception):
    """Base error for the refiner"""

    exit_code = 1


class InputError(RefinerError):
    """Unreadable, missing or malformed input file"""

    exit_code = 2


class ConfigError(RefinerError):
    """Invalid configuration, checkpoint mismatch or broken contract"""

    exit_code = 3


class DomainError(ConfigError, ValueError):
    """An operation was called outside its preconditions"""


class DivergenceError(RefinerError):
    """Training produced a non-finite loss"""

    exit_code = 4
