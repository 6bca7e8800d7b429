"""Exact-likelihood motion compensation for simulated fan-beam CT."""

__version__ = "0.1.0"
