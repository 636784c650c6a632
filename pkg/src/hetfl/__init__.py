"""Federated learning simulator with delay-aware adaptive client sampling."""

__version__ = "0.1.0"
