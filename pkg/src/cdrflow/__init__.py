"""Privacy-preserving aggregation of call detail records into shareable mobility matrices."""

__version__ = "0.1.0"
