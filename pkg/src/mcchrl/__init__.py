"""Hierarchical actor-critic listwise recommendation with an edge/cloud simulator."""

__version__ = "0.1.0"
