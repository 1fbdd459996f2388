"""Desk-scale multimodal captioner with contrastive audio-text alignment."""

__version__ = "0.1.0"
