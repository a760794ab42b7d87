"""Exception types shared across the package.

Validation problems (bad shapes, bad config, bad input files) are
`ValueError` subclasses so callers can catch them uniformly; numeric
blow-ups (NaN/Inf) get their own class because the CLI maps them to a
different exit code.
"""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range or unknown."""


class DataError(ValueError):
    """A data file or generated example violates the schema."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""
