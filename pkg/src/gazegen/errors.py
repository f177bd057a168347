"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so library code should raise the
most specific class that applies instead of bare ValueError when the problem
originates in user-supplied files or configuration.
"""


class GazegenError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(GazegenError):
    """Invalid configuration file, unknown key, or bad command usage."""


class DataError(GazegenError):
    """Malformed or inconsistent input data (CSV, SALB, PGM, checkpoint)."""


class NumericsError(GazegenError):
    """Non-finite values or numerical divergence during compute."""
