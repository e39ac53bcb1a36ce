"""Exception types shared across the package.

The CLI maps these onto exit codes: config/usage problems -> 1, data
problems -> 2, numeric failures -> 3.
"""


class SepkitError(Exception):
    """Base class for all library errors."""


class ShapeError(SepkitError, ValueError):
    """An array argument has an incompatible shape.

    The message names the offending dimension and the expected extent.
    """


class ConfigError(SepkitError, ValueError):
    """Invalid configuration; ``problems`` lists every offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(SepkitError):
    """Malformed or missing data: wav files, manifests, corpora."""


class NumericError(SepkitError, ArithmeticError):
    """A numeric contract was violated (non-finite values, degenerate input)."""


class CheckpointError(SepkitError):
    """Checkpoint file is unreadable, corrupt, or of the wrong version."""
