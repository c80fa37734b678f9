"""Content-based image retrieval over features learned by a convolutional net."""

__version__ = "0.1.0"
