"""Decomposed ADMM solver for separable resource-allocation problems."""

from .model import (
    DEFAULT_EPS_LOG,
    EpigraphUtility,
    FeasibilityReport,
    InvalidProblemError,
    LinearConstraint,
    ObjectiveDomainError,
    ObjectiveTerm,
    ProblemSpec,
    VariableDomain,
    build_problem,
    check_feasibility,
    deserialize,
    eval_objective,
    load_problem,
    save_problem,
    serialize,
)
from .canonical import (
    CanonicalProblem,
    ConstraintGroup,
    EpigraphInfo,
    ParameterPatternError,
    canonicalize,
    epigraph_transform,
    group_constraints,
    to_equality_form,
    update_parameters,
)
from .engine import (
    AdmmState,
    SolveOptions,
    SolveReport,
    WarmStartError,
    adapt_rho,
    dual_step,
    init_state,
    residuals,
    solve,
    solve_problem,
    x_step,
    z_step,
)
from .subsolver import Subproblem, SubsolverResult, assemble, project_domain, solve_subproblem
from .parallel import BatchPlan, BatchTaskError, WorkerPool
from . import cases, oracle

__version__ = "0.1.0"
