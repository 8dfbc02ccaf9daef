"""Stochastic homogenization of HJB equations on continuum percolation clusters."""
from __future__ import annotations

from ._accel import backend, set_backend
from .cluster import ClusterGraph, build_cluster_graph, build_periodic_cluster_graph
from .coefficients import CoefficientField, HamiltonianSpec, build_degenerate_field, constant_field, quadratic_spec
from .environment import BoxDomain, PointConfiguration, condition_on_origin, sample_poisson

__version__ = "0.1.0"

__all__ = [
    "BoxDomain", "PointConfiguration", "sample_poisson", "condition_on_origin",
    "ClusterGraph", "build_cluster_graph", "build_periodic_cluster_graph",
    "CoefficientField", "HamiltonianSpec", "build_degenerate_field", "constant_field", "quadratic_spec",
    "backend", "set_backend", "__version__",
]
