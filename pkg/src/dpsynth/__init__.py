"""Differentially private marginal-based synthetic data, privacy audits and utility metrics."""

__version__ = "0.1.0"
