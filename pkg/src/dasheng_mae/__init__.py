"""Desk-scale masked-autoencoder audio pretraining: waveform to 25 Hz embeddings."""

__version__ = "0.1.0"
