"""MIST: a MaxViT-style encoder with a convolutional attention-mixing decoder."""

__version__ = "0.1.0"
