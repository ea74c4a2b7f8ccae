"""Deblur-and-classify GAN for road-marking glyphs on a numpy autodiff engine."""

__version__ = "0.1.0"
