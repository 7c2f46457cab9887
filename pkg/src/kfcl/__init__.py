"""Continual learning for candidate ranking with Kronecker-factored elastic weight consolidation."""

__version__ = "0.1.0"
