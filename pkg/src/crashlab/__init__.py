"""Mini-IR toolkit for compiler-assisted recovery from corrupted memory addresses."""

__version__ = "0.1.0"
