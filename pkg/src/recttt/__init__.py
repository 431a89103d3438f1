"""Test-time training by cross-reconstruction between frozen and trainable encoders."""

__version__ = "0.1.0"
