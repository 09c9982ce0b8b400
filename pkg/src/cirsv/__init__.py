"""Two-factor CIR bond pricing under fast mean-reverting clustering volatility."""

__version__ = "0.1.0"
