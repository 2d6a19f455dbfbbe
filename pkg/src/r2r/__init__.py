"""Function-preserving network transforms on a small numpy CNN engine."""

__version__ = "0.1.0"
