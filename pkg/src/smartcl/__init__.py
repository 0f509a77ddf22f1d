"""smartcl: continual learning with sparse schematic replay, backward-transfer
gradient constraints, and correlation-consolidation regularization."""

__version__ = "0.1.0"
