"""Finite-state mean-field particle systems: models, jump rates, LLN flow,
sample-path large deviations, minimum-action paths, and simulators."""

from .expr import ExprError, RateExpr, parse_rate_expr
from .model import (
    Finding,
    JumpDirection,
    LatticePoint,
    ModelError,
    ModelSpec,
    PiecewiseLinearPath,
    SimplexPoint,
    StateSpace,
    TupleTransition,
    builtin_model,
    load_model_file,
    model_from_config,
    model_to_config,
    nearest_lattice_point,
    validate_model,
    validation_grid,
)
from .rates import (
    JumpRateTable,
    NegativeSupport,
    build_rate_table,
    effective_matrix,
    finite_n_rates,
    limit_rates,
    rate_estimate_report,
    tuple_count,
)
from .structure import (
    AccessibilityClosure,
    CommunicatingPath,
    accessibility_closure,
    build_boundary_escape,
    build_interior_path,
    build_path_single_jump,
    check_simjumps,
    check_single_ergodic,
    check_ue,
    is_k_ergodic,
    represent_direction,
    solve_nonneg_linear,
)
from .lln import LlnTrajectory, drift, integrate_lln, interiority_check
from .ldp import (
    ActionReport,
    LocalRateResult,
    hamiltonian,
    local_rate,
    local_rate_primal,
    minimize_action,
    path_action,
    perturb_path,
    poisson_ell,
    quasipotential,
    reparametrization_check,
    sanov_cost,
    superlinearity_bound_check,
)
from .simulate import (
    ControlSignal,
    RareEventEstimate,
    TrajectorySample,
    TransientDistribution,
    birth_chain_bound,
    build_tilt_control,
    controlled_run,
    exact_transient,
    excursion_bound,
    gillespie_run,
    mc_rate_estimate,
    stream,
)

__version__ = "0.1.0"
