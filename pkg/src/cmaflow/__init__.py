"""Numerical solver and verification toolkit for a degenerate parabolic
complex Monge-Ampere flow on the unit ball of C^n (n = 1, 2).

The flow solved is

    det( d^2 u / dz_j dz_k-bar )  =  exp( d_t u + F(t, z, u) ) * g(z)

on ]0,T[ x B with Cauchy-Dirichlet data on the parabolic boundary.  The
discretization is a monotone wide-stencil scheme: the Monge-Ampere root
det(H)^(1/n) is replaced by a minimum of Hermitian Laplacians over a finite
dictionary of unit-determinant positive matrices, the curved boundary is
handled by Shortley-Weller fractional steps, and time stepping is implicit
Euler with per-node scalar solves.

Besides the solver, the package ships the quantitative apparatus that the
underlying theory makes explicit: barrier functions, a constants ledger
(uniform bounds, time-Lipschitz and time-semiconcavity constants), a
comparison-principle check, and four structural transforms (time scaling,
semiconcavity averaging, translation gluing, Mobius averaging) with
dominance reports.
"""

from cmaflow.domain import BallDomain, SpaceGrid, TimeGrid, build_grid, lateral_trace_points
from cmaflow.potentials import (
    BoundaryData,
    GridFunction,
    psh_check,
    slice_l1_bound_check,
    submean_check,
    time_lipschitz_estimate,
    time_semiconcavity_estimate,
)
from cmaflow.ma_ops import (
    HermitianDictionary,
    MaField,
    OperatorAssembly,
    complex_hessian,
    delta_A,
    harmonic_extension,
    ma_density,
    ma_root,
    maximal_psh,
    mixed_ma_check,
    solve_rho,
)
from cmaflow.flow import (
    ConstantsLedger,
    FlowProblem,
    FSpec,
    FlowResult,
    SubsolutionReport,
    boundary_attainment_report,
    comparison_check,
    compute_constants,
    solve_flow,
    step_implicit,
    sub_barrier_cauchy,
    sub_barrier_dirichlet,
    subsolution_residual,
    super_barrier,
)
from cmaflow.transforms import (
    TransformReport,
    mobius_average,
    mobius_map,
    semiconcavity_average,
    time_scale,
    walsh_translate,
)

__version__ = "0.1.0"
