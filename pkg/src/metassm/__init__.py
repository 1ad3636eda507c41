"""Meta-amortized flow-matching inference for sequential sampling models."""

__version__ = "0.1.0"
