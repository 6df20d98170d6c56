"""Diffusion-limited aggregation driven by random walks, classical diffusion
and free Schroedinger propagation, with mass-dimension analysis."""

__version__ = "0.1.0"
