"""Risk-limiting dynamic contracts for direct load control."""
__version__ = "0.1.0"
