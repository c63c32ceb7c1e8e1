"""Inertial projected gradient flows for time-varying constrained nonconvex
optimisation, with sampled certificates for jumping, tracking and escaping
local minimum trajectories."""

from .errors import *  # noqa: F401,F403
from .geometry import (
    GeometryEval,
    error_field_U,
    evaluate_geometry,
    orthogonality_check,
    pode_rhs,
    projected_gradient,
    reshaped_landscape,
    retract,
)
from .problem import (
    MinTrajectory,
    ProblemDefinition,
    builtin_ackley_constrained,
    builtin_quartic,
    builtin_tracking_quadratic,
    check_derivatives,
    known_trajectories,
    make_problem,
    register_problem,
)
from .flow import (
    FlowConfig,
    TrajectoryRecord,
    convergence_experiment,
    forward_euler_track,
    frozen_flow_classify,
    integrate_pode,
    local_minimum_refine,
    sequential_proximal_solve,
    trace_minimum_trajectory,
)

__version__ = "0.1.0"
from .certify import (
    Ball,
    Box,
    check_dominance,
    detect_jumps,
    equilibrium_branch,
    escape_certificate,
    estimate_one_point_convexity,
    jump_certificate,
    jump_certificate_averaged,
    sequential_jump_report,
    shallowness_check,
    tracking_certificate,
)
from .experiments import run_scenario
from .scenario import load_scenario, validate_scenario
