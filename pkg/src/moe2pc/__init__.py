"""Two-party secure inference for sparse mixture-of-experts transformers."""

__version__ = "0.1.0"
