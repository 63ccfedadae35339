"""Disentangled face-factor representation learning on a synthetic world."""

__version__ = "0.1.0"
