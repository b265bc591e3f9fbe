"""Grouped ConvMixer classifier for benign/malignant histopathology images."""

__version__ = "0.1.0"
