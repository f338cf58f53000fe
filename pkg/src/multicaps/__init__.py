"""Capsule networks, overlapping-digit datasets, and the data-injection
transfer-learning protocol, on a self-contained numpy autodiff engine."""

__version__ = "0.1.0"
