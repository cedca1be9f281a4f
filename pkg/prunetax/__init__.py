"""prunetax - A taxonomy of channel pruning signals for small CNNs."""

__version__ = "0.1.0"
