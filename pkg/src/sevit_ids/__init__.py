"""Hybrid SE-ViT / BiLSTM intrusion-detection classifier in plain numpy."""

__version__ = "0.1.0"
