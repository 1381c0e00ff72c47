"""Desk-scale biome-transfer laboratory for masked-autoencoder vision transformers."""

__version__ = "0.1.0"
