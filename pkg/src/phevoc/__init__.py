"""Embedded optimal control and receding-horizon energy management for a bi-modal parallel HEV."""

__version__ = "0.1.0"
