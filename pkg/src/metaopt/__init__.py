"""Meta-training a per-parameter learned optimizer for corruption robustness."""

__version__ = "0.1.0"
