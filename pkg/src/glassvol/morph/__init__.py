"""Toy generative decoders, loss suite, optimizer, two-stage training, and
few-shot latent fitting."""

from .optim import AdamState, adam_step

__all__ = ["AdamState", "adam_step"]
