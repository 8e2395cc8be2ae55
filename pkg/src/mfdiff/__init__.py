"""Simulation and mean-field analysis of information diffusion in directed
networks of discrete-choice agents."""

from . import abm, graph, metrics, mfd, recipe, rum, twostate

__version__ = "0.1.0"

__all__ = ["abm", "graph", "metrics", "mfd", "recipe", "rum", "twostate", "__version__"]
