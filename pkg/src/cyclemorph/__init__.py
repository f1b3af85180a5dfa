"""Cycle-consistent unsupervised deformable image registration in numpy."""

__version__ = "0.1.0"
