"""Connectome-based behavior prediction benchmark: KRR, ChebConv GNNs and a Transformer-GNN."""

__version__ = "0.1.0"
