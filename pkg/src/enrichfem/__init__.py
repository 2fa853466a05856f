"""Finite element solvers enriched by neural-network priors.

The package provides structured meshes, Lagrange P1-P3 finite elements,
multilayer perceptrons with exact input derivatives, parametric
physics-informed training, additive and multiplicative trial-space
enrichment, and the analysis tooling (convergence orders, gains, gain
constants) around them, plus a CLI (`enrichfem`).
"""

__version__ = "0.1.0"
