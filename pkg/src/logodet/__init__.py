"""Region-based logo detection and brand recognition on the CPU."""

__version__ = "0.1.0"
