"""Recommender-codebase evolution driven by simulator critiques and diagnostic probes."""

__version__ = "0.1.0"
