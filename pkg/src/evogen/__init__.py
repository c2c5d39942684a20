"""Simulation and analysis of evolving genealogies in spatial Moran models."""

__version__ = "0.1.0"
