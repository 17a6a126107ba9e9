"""Design, simulation and analysis of cluster-level switchback experiments."""

__version__ = "0.1.0"
