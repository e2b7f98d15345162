"""Trust-aware routing on Cell Transmission Model networks."""
__version__ = "0.1.0"
