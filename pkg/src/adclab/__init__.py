"""Exemplar-free class-incremental learning with adversarial drift compensation."""

__version__ = "0.1.0"
