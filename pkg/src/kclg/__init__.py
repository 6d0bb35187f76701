"""Kinetically constrained lattice gases: models, multistep moves, spectra, diffusion and simulation."""

__version__ = "0.1.0"
