"""Quantum hydrodynamic trajectories for a decohering two-Gaussian superposition."""
