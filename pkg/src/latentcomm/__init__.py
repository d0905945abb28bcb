"""Latent-space image transmission over noisy channels.

A compact research codebase: a KL-regularized adversarial autoencoder
compresses images into small latent tensors, an AWGN channel corrupts
them, and a diffusion de-noiser at the receiver removes channel noise
before decoding. Includes the full experiment harness (dataset
ingestion, SNR / de-noising-step sweeps, metric reports).
"""

__version__ = "0.1.0"
