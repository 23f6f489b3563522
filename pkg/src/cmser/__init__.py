"""Cross-modal attention emotion classifier over precomputed feature sequences."""

__version__ = "0.1.0"
