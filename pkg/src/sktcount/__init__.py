"""Structured knowledge transfer for lightweight crowd counting."""

__version__ = "0.1.0"
