"""Delayed rough paths, rough convolutions and mild solutions of delay rough PDEs."""

__version__ = "0.1.0"
