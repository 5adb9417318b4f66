"""Certified multi-fidelity trust-region optimization for parabolic PDEs."""
