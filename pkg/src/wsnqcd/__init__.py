"""Quickest change detection over a fork-join random-access sensor network."""

__version__ = "0.1.0"
