"""Numerical laboratory for diffusion of a quantum particle weakly coupled to phonon baths."""

__version__ = "0.1.0"
