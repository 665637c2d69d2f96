"""Stability laboratory for two-class ring-road traffic.

A second-order human-driver class and an optimal-control autonomous
class share one periodic road.  The package provides the pure solvers
for each class, the coupled solver, closed-form linear mode analysis,
and sweep drivers that map the stable region over class mixes.
"""

from .arz import (
    ArzState,
    CflViolationError,
    NegativeDensityError,
    arz_step,
    char_speed_bound,
    dissipation_speed,
    from_conservative,
    solve_arz,
    to_conservative,
)
from .core import (
    ClassTrajectory,
    DomainError,
    GridSpec,
    ModelParams,
    UniformFlow,
    av_running_cost,
    clamp_speed,
    desired_speed,
    desired_speed_deriv,
    error_function,
    hesitation,
    hesitation_deriv,
)
from .experiments import (
    DENSITY_SUM_CAP,
    PhaseDiagram,
    ScenarioSpec,
    StabilityVerdict,
    UnresolvedScenarioError,
    build_initial_conditions,
    classify_stability,
    run_group1,
    run_group2,
    run_group3,
    run_scenario,
)
from .mfg import MfgUnknowns, solve_mfg
from .mixed import MixedUnknowns, solve_mixed
from .newton import NewtonReport, SingularJacobianError, newton_solve
from .stability import (
    FourierModePair,
    ModeEnergyScan,
    ResonanceError,
    arz_linear_stable,
    mfg_boundedness_scan,
    mfg_mode_solution,
    mode_energy,
    reduced_mfg_rhs_check,
    scan_lambdas,
)

__version__ = "0.1.0"

__all__ = [
    "ArzState",
    "CflViolationError",
    "ClassTrajectory",
    "DENSITY_SUM_CAP",
    "DomainError",
    "FourierModePair",
    "GridSpec",
    "MfgUnknowns",
    "MixedUnknowns",
    "ModeEnergyScan",
    "ModelParams",
    "NegativeDensityError",
    "NewtonReport",
    "PhaseDiagram",
    "ResonanceError",
    "ScenarioSpec",
    "SingularJacobianError",
    "StabilityVerdict",
    "UniformFlow",
    "UnresolvedScenarioError",
    "arz_linear_stable",
    "arz_step",
    "av_running_cost",
    "build_initial_conditions",
    "char_speed_bound",
    "clamp_speed",
    "classify_stability",
    "desired_speed",
    "desired_speed_deriv",
    "dissipation_speed",
    "error_function",
    "from_conservative",
    "hesitation",
    "hesitation_deriv",
    "mfg_boundedness_scan",
    "mfg_mode_solution",
    "mode_energy",
    "newton_solve",
    "reduced_mfg_rhs_check",
    "run_group1",
    "run_group2",
    "run_group3",
    "run_scenario",
    "scan_lambdas",
    "solve_arz",
    "solve_mfg",
    "solve_mixed",
    "to_conservative",
]
