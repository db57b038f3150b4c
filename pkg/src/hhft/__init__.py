"""Desk-scale heterogeneous-feature transformer stack for CTR ranking.

A small numpy library: a tape-based autodiff engine, semantic feature
tokenization, heterogeneous and composite-projection attention layers,
baseline models, a training/evaluation loop, a synthetic dataset generator
with an exact probability oracle, and a CLI harness for ablations and
scaling sweeps.
"""

from .autodiff import FlopCounter, GradCheckReport, Tape, Tensor, grad_check
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    MetricError,
    OracleError,
    SchemaError,
    ShapeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "FlopCounter",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "grad_check",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "MetricError",
    "OracleError",
    "SchemaError",
    "ShapeError",
    "UsageError",
    "__version__",
]
