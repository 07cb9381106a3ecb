"""Adaptive black-box attacks on cooperative multi-agent policies."""

__version__ = "0.1.0"
