"""Sim-to-real segmentation toolkit: IoU-ranking blend curriculum, flow style transfer,
Fourier amplitude swap and a seeded desk-scale training harness."""

__version__ = "0.1.0"
