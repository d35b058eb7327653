"""Robustness evaluation and attribution for toy ViT and ResNet classifiers."""

__version__ = "0.1.0"
