"""Full multigrid finite element solver for semilinear elliptic problems."""

from .correction import CorrectionConfig, one_correction_step
from .estimator import adaptive_fmg, compute_indicators, dorfler_mark
from .fmg import FMGConfig, Hierarchy, build_hierarchy, full_multigrid, newton_reference_solve
from .mesh import Mesh, bisect_refine, l_shaped_mesh, uniform_refine, unit_square_mesh
from .problems import get_problem

__version__ = "0.1.0"

__all__ = [
    "CorrectionConfig",
    "FMGConfig",
    "Hierarchy",
    "Mesh",
    "adaptive_fmg",
    "bisect_refine",
    "build_hierarchy",
    "compute_indicators",
    "dorfler_mark",
    "full_multigrid",
    "get_problem",
    "l_shaped_mesh",
    "newton_reference_solve",
    "one_correction_step",
    "uniform_refine",
    "unit_square_mesh",
]
