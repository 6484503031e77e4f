"""Convolutional DRAW image model with a progressive latent-coding codec."""

__all__ = [
    "analysis",
    "codec",
    "coder",
    "config",
    "data",
    "draw",
    "imageio",
    "likelihood",
    "models",
    "params",
    "trainer",
]
