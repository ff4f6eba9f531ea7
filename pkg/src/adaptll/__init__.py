"""Memory-budgeted CNN training with adaptive local learning."""

__version__ = "0.1.0"
