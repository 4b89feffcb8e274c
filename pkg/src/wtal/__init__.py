"""Weakly supervised temporal action localization on precomputed snippet features."""

__version__ = "0.1.0"
