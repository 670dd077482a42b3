"""Text-conditioned human-object interaction synthesis on a procedural world."""

__version__ = "0.1.0"
