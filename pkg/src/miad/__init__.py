"""Mirage atom diffusion for periodic crystals, in plain numpy."""
