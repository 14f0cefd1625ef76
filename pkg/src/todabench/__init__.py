"""Numerical toolkit for rank-two Toda systems on the flat torus."""

from .bubbles import BarycenterConfig, JoinPoint, bubble, test_map
from .cartan import CartanSpec, SystemState, energy, energy_gradient, mt_deficit, residual
from .concentration import (DiscreteMeasure, covering_merge, dist_to_barycenters, join_coordinates,
                            project_barycenters, transport_distance, unit_density)
from .solver import SolveOptions, find_critical, lambda_set, minimize_coercive
from .torus import TorusField, TorusGrid, TorusPoint, flat_distance

__all__ = [
    "BarycenterConfig", "JoinPoint", "bubble", "test_map", "CartanSpec", "SystemState", "energy",
    "energy_gradient", "mt_deficit", "residual", "DiscreteMeasure", "covering_merge",
    "dist_to_barycenters", "join_coordinates", "project_barycenters", "transport_distance",
    "unit_density", "SolveOptions", "find_critical", "lambda_set", "minimize_coercive",
    "TorusField", "TorusGrid", "TorusPoint", "flat_distance",
]
