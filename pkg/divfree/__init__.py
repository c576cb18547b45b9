"""Spectral toolkit for divergence-free stress fields via stress potentials."""

__version__ = "0.1.0"
