"""Quantized forward-backward SDE solver for quasi-linear parabolic PDEs."""

__version__ = "0.1.0"

from .grid import GridSpec, SpatialGrid  # noqa: E402
from .problems import Problem, DifferentiatedProblem, builtin  # noqa: E402
from .quantizer import QuantizerGrid, get_quantizer, train  # noqa: E402
from .solver import Solution, SolverConfig, Variant, solve  # noqa: E402

__all__ = [
    "GridSpec",
    "SpatialGrid",
    "Problem",
    "DifferentiatedProblem",
    "builtin",
    "QuantizerGrid",
    "get_quantizer",
    "train",
    "Solution",
    "SolverConfig",
    "Variant",
    "solve",
]
