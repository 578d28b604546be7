"""Exception types shared across the package.

The command line maps these to distinct exit codes, so library code should
raise the most specific type that applies.
"""


class ConfigError(ValueError):
    """Invalid configuration value or combination (exit code 2)."""


class MeshError(ValueError):
    """Invalid or degenerate mesh data."""


class SolverError(RuntimeError):
    """Linear solver failed to reach the requested tolerance (exit code 3)."""
