"""Impedance-based stability analysis and adaptive active damping for
grid-following inverters on weak grids."""

__version__ = "0.1.0"
