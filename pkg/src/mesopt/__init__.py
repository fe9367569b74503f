"""Simulation and sample-path gradient optimization of base-stock policies on
multi-echelon BOM networks."""

from __future__ import annotations

__version__ = "0.1.0"

from .bom import BomNetwork, GeneratorSpec, Topology, generate, layer_count, network_stats, spmv_T, validate
from .bp import backward_sweep, batch_gradient, grad_bp, grad_fd, record_forward
from .ipa import grad_ipa
from .simulator import CostParams, GradientResult, Trajectory, evaluate_policy, simulate, simulate_totals
from .stochastic import (
    ConstantLead,
    DeterministicDemand,
    NormalDemand,
    ScenarioModels,
    ScenarioPath,
    TruncatedNormalLead,
    batch_paths,
    sample_path,
)

__all__ = [
    "BomNetwork", "GeneratorSpec", "Topology", "generate", "layer_count", "network_stats", "spmv_T",
    "validate", "backward_sweep", "batch_gradient", "grad_bp", "grad_fd", "record_forward", "grad_ipa",
    "CostParams", "GradientResult", "Trajectory", "evaluate_policy", "simulate", "simulate_totals",
    "ConstantLead", "DeterministicDemand", "NormalDemand", "ScenarioModels", "ScenarioPath",
    "TruncatedNormalLead", "batch_paths", "sample_path",
]
