"""Simulation and Hamiltonian-learning workbench for dissipative bosonic lattices."""

__version__ = "0.1.0"
