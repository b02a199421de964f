"""Desk-scale simulator for privacy-preserving federated hypergraph
learning over epidemic mobility data."""

__version__ = "0.1.0"
