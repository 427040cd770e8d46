"""Heterogeneity-aware cooperative federated edge learning simulator."""

__version__ = "0.1.0"

SCHEMES = ("HCEF", "CEF", "CEF-F", "CEF-C", "MLL-SGD")
