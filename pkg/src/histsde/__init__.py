"""Continuous-time SDE inference and trajectory diagnostics for panel data."""

__version__ = "0.1.0"
