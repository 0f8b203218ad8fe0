"""Simulation and numerics for CMJ branching processes with immigration and
their continuous-state branching limits."""

__version__ = "0.1.0"
