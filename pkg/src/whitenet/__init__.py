"""Whitened feedforward networks trained by amortized natural-gradient
descent, with first-order baselines and Fisher conditioning diagnostics."""

__version__ = "0.1.0"
