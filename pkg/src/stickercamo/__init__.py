"""Adversarial sticker camouflage for 3D targets against object detectors."""

__version__ = "0.1.0"
