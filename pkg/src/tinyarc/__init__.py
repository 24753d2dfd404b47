"""ARC-AGI-2 solving pipeline around a small transformer."""
__version__ = "0.1.0"
