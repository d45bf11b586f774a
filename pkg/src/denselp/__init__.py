"""LP-relaxation MAP inference for dense Potts CRFs with permutohedral-lattice filtering."""

from .energy import ip_energy, lp_energy, proximal_objective
from .model import (
    ConfigError,
    EnergyModel,
    FeatureField,
    GaussianKernel,
    SolverConfig,
    argmax_round,
    load_config,
    parse_config,
)
from .permutohedral import build_lattice, filter, ordered_filter
from .proxlp import ProxTrace, prox_solve, prox_solve_accelerated

__all__ = [
    "ConfigError",
    "EnergyModel",
    "FeatureField",
    "GaussianKernel",
    "ProxTrace",
    "SolverConfig",
    "argmax_round",
    "build_lattice",
    "filter",
    "ip_energy",
    "load_config",
    "lp_energy",
    "ordered_filter",
    "parse_config",
    "prox_solve",
    "prox_solve_accelerated",
    "proximal_objective",
]
