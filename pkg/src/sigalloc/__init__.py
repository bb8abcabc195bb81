"""Signature-informed asset allocation."""

__version__ = "0.1.0"
