"""Deterministic simulation and layered control of a planar free-floating
space manipulator, with an online-learned model of the actuation and
dissipation channel."""

__version__ = "0.1.0"
