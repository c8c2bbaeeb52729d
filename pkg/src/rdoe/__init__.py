"""Robust dynamic operating envelopes on unbalanced three-phase feeders."""

__version__ = "0.1.0"
