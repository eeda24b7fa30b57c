"""Adversarial patches that fool both a CNN classifier and its Grad-CAM interpretation."""

__version__ = "0.1.0"
