"""Hallucination-aware generative channel estimation at desk scale."""

__version__ = "0.1.0"
