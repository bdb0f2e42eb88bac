"""Code-represented knowledge bases plus a compute-and-write research loop."""

__version__ = "0.1.0"
