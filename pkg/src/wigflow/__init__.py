"""Matrix martingales with prescribed entry densities and resolvent flows."""

__version__ = "0.1.0"
