"""Disentangled conditional diffusion for multi-contrast image
super-resolution: schedules, sampling, the multi-stream U-Net, losses,
curriculum batching, data pipeline, training, and evaluation."""

__version__ = "0.1.0"
