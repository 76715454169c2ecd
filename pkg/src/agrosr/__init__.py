"""Detection-oriented super-resolution for agricultural remote sensing."""

__version__ = "0.1.0"
