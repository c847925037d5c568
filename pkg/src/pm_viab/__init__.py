"""Rescaled stochastic porous-media systems: integration, viability and stabilization."""

__version__ = "0.1.0"

from .drift import build_drift, build_group, group_apply, omega, omega_defect, sample_brownian
from .dynamics import (
    System,
    prop1_rate,
    prop2_rate,
    recover_original,
    solve_euler_fundamental,
    solve_rescaled,
    stable_step,
)
from .model import ControlSet, ModelSpec, make_beta, make_coupling, validate_assumptions
from .spatial import GridDomain, build_grid
from .stabilization import (
    StabilizationConfig,
    feasible_controls,
    necessary_residual,
    psi_j,
    run_stabilization,
    select_feedback,
)
from .viability import (
    appendix_initial_estimate,
    construct_eps_approx,
    make_constraint,
    near_viability_gap,
    tangency_profile,
    validate_eps_approx,
)

__all__ = [name for name in dir() if not name.startswith("_")]
