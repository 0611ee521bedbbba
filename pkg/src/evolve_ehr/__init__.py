"""Evolve: causal-masked transformer with per-position forecast-interval predictions,
plus trajectory analyses over its predictions and embeddings."""

__version__ = "0.1.0"
