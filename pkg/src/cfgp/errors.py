"""Exception types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class CfgpError(Exception):
    exit_code = 1


class ArgumentError(CfgpError, ValueError):
    """Bad call arguments or CLI usage."""

    exit_code = 2


class ConfigError(ArgumentError):
    exit_code = 2


class DataError(CfgpError):
    """Input data violates an invariant (non-monotone time, collisions, ...)."""

    exit_code = 3


class FormatError(DataError):
    """Input file is structurally malformed (e.g. a missing column)."""

    exit_code = 3


class NumericalError(CfgpError, ArithmeticError):
    """Cholesky exhaustion, non-finite activations or losses."""

    exit_code = 4
