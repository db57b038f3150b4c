"""Exception taxonomy shared across the package.

User-facing errors (bad configs, malformed data, broken files) derive from
UsageError so the CLI can map them to exit code 2; everything else is an
internal error (exit code 1).
"""


class UsageError(Exception):
    """Base for errors caused by user input rather than library bugs."""


class ConfigError(UsageError):
    """Invalid or inconsistent configuration."""


class SchemaError(UsageError):
    """A record or raw value does not conform to its feature schema."""


class DataError(UsageError):
    """Malformed training data, e.g. non-binary labels."""


class CheckpointError(UsageError):
    """Unreadable, truncated, or mismatched checkpoint file."""


class OracleError(UsageError):
    """Ground-truth oracle applied to data it does not describe."""


class MetricError(UsageError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class ShapeError(ValueError):
    """Operands with incompatible shapes reached a tensor op."""


class ContractError(ValueError):
    """An internal API precondition was violated."""
