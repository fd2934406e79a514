"""Adversarial cloud attacks on salient object detection, and a learned defense."""

__version__ = "0.1.0"
