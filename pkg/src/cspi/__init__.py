"""Discrete-time coherent-state path integrals in the Gaussian approximation.

Modules:
    models        model definitions, coherent states, published references
    oracle        exact-diagonalization thermodynamics
    semiclassics  saddle points, Hessian blocks, fluctuation kernels
    spectral      Matsubara sums, contour corrections, sum rules
    pipeline      model-level correction workflows
    cli           configuration-driven command line
"""

from .models import CoherentPoint, HilbertConfig, ModelSpec
from .oracle import ThermalResult, exact_thermal
from .semiclassics import Discretization, HessianBlocks
from .spectral import CorrectionReport

__version__ = "0.1.0"

__all__ = [
    "CoherentPoint",
    "CorrectionReport",
    "Discretization",
    "HessianBlocks",
    "HilbertConfig",
    "ModelSpec",
    "ThermalResult",
    "exact_thermal",
    "__version__",
]
