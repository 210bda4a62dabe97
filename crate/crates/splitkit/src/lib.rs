//! Second-order exponential splitting integrators for linear nonautonomous
//! problems u'(t) = [A + B(t)] u(t), with the quadrature-kernel machinery
//! that explains their error constants, a Duhamel-series reference oracle,
//! spectral-free model problems, and a convergence-study harness.

pub mod duhamel;
pub mod error;
pub mod expaction;
pub mod models;
pub mod operator;
pub mod quadrature;
pub mod splitting;
pub mod study;
pub mod verify;

pub use duhamel::{neumann_iterate, reference_solution, NeumannConfig};
pub use error::{Error, Result};
pub use expaction::{BackendVariant, ExpActionBackend, ResolvedMethod};
pub use models::{
    fd_weights, first_derivative_matrix, random_matrix_problem, schrodinger_problem,
    second_derivative_matrix_dirichlet, transport_exact, transport_exact_on_grid,
    transport_problem, BoundaryKind, Grid1D, ModelKind, ModelSpec,
};
pub use operator::{
    b_derivative, commutator, effective_c, CommutatorMode, DenseOperator, DerivativeMode,
    EvolutionProblem, Structure, TimeDependentOperator,
};
pub use quadrature::{
    apply_rule_1d, d_family_rules, f_family_rules, kernel_integral, optimal_tau_f,
    quadrature_error_oracle, ErrorKernel, Family, Polynomial, QuadratureRule1D,
    SimplexQuadratureRule,
};
pub use splitting::{
    build_d, build_f, compile_from_quadrature, integrate, step, IntegrateOptions,
    IntegrationReport, SchemeFamily, SplittingScheme, Stage,
};
pub use study::{
    csv_string, defaults_for, emit_outputs, estimate_order, run_convergence_study,
    stage_cost_ratio, svg_string, tau_star, CellRow, EmitMode, ErrorTable, FittedOrder,
    ProblemKind, ReferenceMode, StudyConfig,
};
pub use verify::{run_all, CheckResult};
