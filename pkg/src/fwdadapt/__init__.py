"""Forward-only test-time adaptation for small vision models."""

__version__ = "0.1.0"
