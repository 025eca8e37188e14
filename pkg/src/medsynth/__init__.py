"""medsynth: desk-scale text-to-image diffusion toolkit on synthetic data."""

__version__ = "0.1.0"
