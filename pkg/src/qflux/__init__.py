"""Quantum probability flux through surfaces: currents, exit statistics, Bohmian ensembles."""

__version__ = "0.1.0"
