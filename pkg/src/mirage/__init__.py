"""mirage: synthetic anomaly generation, mask creation, and benchmarking."""

__version__ = "0.1.0"
