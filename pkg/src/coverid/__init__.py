"""Desk-scale cover song identification: CQT features, a ResNet-IBN embedding
network trained with classification and triplet losses, and cosine retrieval."""

__version__ = "0.1.0"
