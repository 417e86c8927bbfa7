"""Gated sparse attention for small transformers: training, circuit discovery and tooling."""

__version__ = "0.1.0"
