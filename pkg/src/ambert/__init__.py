"""Multi-grained pre-trained language model (fine + coarse token streams)."""

__version__ = "0.1.0"
