"""Two-stage medical entity linking: bi-encoder retrieval plus cross-encoder re-ranking."""

__version__ = "0.1.0"
