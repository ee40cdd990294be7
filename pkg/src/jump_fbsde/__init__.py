"""Discrete-time solver for decoupled forward-backward SDEs with a single jump."""

__version__ = "0.1.0"
