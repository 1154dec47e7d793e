"""Rotational contrast-maximisation estimation and engine datapath simulation."""

__version__ = "0.1.0"
