"""Error taxonomy shared across modules.

Exit-code mapping lives in the CLI: ConfigError and ValidationError are
user mistakes (exit 1), NumericError is a numeric failure (exit 2).
"""


class WorldGroundError(Exception):
    pass


class ConfigError(WorldGroundError):
    """Bad configuration value or key."""


class ValidationError(WorldGroundError):
    """Bad runtime input: shapes, ranges, empty collections."""


class NumericError(WorldGroundError):
    """NaN/Inf or a failed numeric check."""
