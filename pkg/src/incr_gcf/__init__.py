"""Incremental LightGCN training with preference-score distillation."""

__version__ = "0.1.0"
