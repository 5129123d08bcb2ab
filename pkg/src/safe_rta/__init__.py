"""Run-time assurance filters (Simplex, ASIF) for control-affine systems."""

from .scenario import InspectionConfig, run_simulation

__version__ = "0.1.0"

__all__ = ["InspectionConfig", "run_simulation", "__version__"]
