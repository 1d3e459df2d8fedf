"""Distribution-dependent multi-distribution learning: algorithms, bounds and oracles."""

__version__ = "0.1.0"
