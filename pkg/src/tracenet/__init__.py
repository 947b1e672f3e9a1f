"""Graph-text consistency checking for process descriptions."""

__version__ = "0.1.0"
