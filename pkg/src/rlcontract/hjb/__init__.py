from .grid import Axis, ControlMesh, GridSpec, default_grid, default_mesh
from .hamiltonian import hamiltonian_terms, running_reward
from .policy import Controls, FixedPolicy, Policy, extract_policy
from .solver import (BaselineSolution, SolverError, ValueGrid, estimate_levels, solve_baseline_hjb,
                     solve_constrained_hjb, solve_risk_neutral)

__all__ = [
    "Axis", "ControlMesh", "GridSpec", "default_grid", "default_mesh", "hamiltonian_terms",
    "running_reward", "Controls", "FixedPolicy", "Policy", "extract_policy", "BaselineSolution", "SolverError",
    "ValueGrid", "estimate_levels", "solve_baseline_hjb", "solve_constrained_hjb", "solve_risk_neutral",
]
