"""Numerical checks of the local Tb construction for vertical square functions on discretized measures."""
from .geometry import Cube, GoodnessParams, DyadicGrid, classify_goodness, reference_grid, sample_grid
from .harness import RunReport, Scenario, generate_scenario, run_pipeline, validate_hypotheses
from .kernel import KernelSpec, verify_kernel_conditions
from .measure import BoundedDensity, CellMask, CellMeasure
from .sqfn import TimeQuadrature, restricted_operator_norm, vertical_sf

__all__ = ["BoundedDensity", "CellMask", "CellMeasure", "Cube", "GoodnessParams", "KernelSpec", "DyadicGrid",
           "RunReport", "Scenario", "TimeQuadrature", "classify_goodness", "generate_scenario", "reference_grid",
           "restricted_operator_norm", "run_pipeline", "sample_grid", "validate_hypotheses",
           "verify_kernel_conditions", "vertical_sf"]
