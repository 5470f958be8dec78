"""Structure-preserving solvers for entropic cross-diffusion systems."""

__version__ = "0.1.0"
