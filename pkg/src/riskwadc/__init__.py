"""Risk-constrained wide-area damping control for grids with converter-interfaced resources."""

__version__ = "0.1.0"
