"""Desk-scale protein chat pipeline: multi-level encoders, PLP-former,
context-gated alignment and a soft-prompted toy decoder."""

__version__ = "0.1.0"
