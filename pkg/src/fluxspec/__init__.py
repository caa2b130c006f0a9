"""Fluxonium spectroscopy and qubit time-series toolkit."""

__version__ = "0.1.0"
