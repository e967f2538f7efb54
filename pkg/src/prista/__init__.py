"""Coded diffraction pattern phase retrieval: operators, classical solvers and an unfolded ISTA network."""

__version__ = "0.1.0"
