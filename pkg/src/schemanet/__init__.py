"""Scene-graph classification by attention with schema embeddings."""

__version__ = "0.1.0"
