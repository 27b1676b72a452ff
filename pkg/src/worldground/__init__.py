"""Command-conditioned grounding with a spatial-aware world model."""

__version__ = "0.1.0"
