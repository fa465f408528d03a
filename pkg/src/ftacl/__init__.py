"""Adapter-incremental continual learning for audio spectrogram transformers."""

__version__ = "0.1.0"
