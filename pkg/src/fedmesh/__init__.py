"""Federated transfer learning for binary image classification, edge to cloud."""

__version__ = "0.1.0"
