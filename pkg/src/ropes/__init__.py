"""Label-free articulated-arm pose recovery from rendered interventional images."""

__version__ = "0.1.0"
