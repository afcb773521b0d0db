"""Meta-learning reconstructions for linear inverse problems."""
__version__ = "0.1.0"
