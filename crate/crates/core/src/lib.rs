//! Multi-period security-constrained unit commitment with AC optimal power flow.
//!
//! The library decomposes the mixed-integer nonlinear scheduling problem into
//! per-period network subproblems (second-order-cone relaxations of the AC
//! power-flow equations) and per-bus commitment subproblems (mixed-integer
//! linear programs), coordinated by a penalty alternating direction method.
//! A convex per-period relaxation provides a dual bound used to report
//! optimality gaps, and an independent evaluator re-checks feasibility and
//! recomputes the exact objective from first principles.

pub mod acopf;
pub mod backends;
pub mod evaluate;
pub mod formulation;
pub mod gsf;
pub mod instance;
pub mod objective;
pub mod padm;
pub mod screening;
pub mod subproblems;
pub mod suite;

pub use instance::Instance;

/// Feasibility tolerance used across residual checks.
pub const FEAS_TOL: f64 = 1e-8;

/// Library-wide error type. Variants mirror the failure modes of the module
/// contracts; callers that need structured handling can match on them,
/// everything else can bubble them up as strings.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error at {path}: {detail}")]
    Schema { path: String, detail: String },
    #[error("dangling reference at {path}: {detail}")]
    Reference { path: String, detail: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad generator spec: {0}")]
    BadSpec(String),
    #[error("enumeration too large: {0}")]
    TooLarge(String),
    #[error("aggregated mode requires chi variables")]
    MissingChi,
    #[error("power {0} outside piecewise-linear curve support of device {1}")]
    OutOfSupport(f64, String),
    #[error("GSF rows unavailable: {0}")]
    MissingGsf(String),
    #[error("reduced admittance matrix is singular (AC subgraph disconnected)")]
    SingularH,
    #[error("voltage product too small to recover shunt steps (omega={0})")]
    DegenerateVoltage(f64),
    #[error("malformed program: {0}")]
    MalformedProgram(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("anchor violates its set membership: {0}")]
    InfeasibleAnchor(String),
    #[error("subproblem failure ({context}): {detail}")]
    SubproblemFailure { context: String, detail: String },
    #[error("dual bound must be positive to report a gap (got {0})")]
    NonpositiveBound(f64),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn schema(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), detail: detail.into() }
    }
    pub fn reference(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Reference { path: path.into(), detail: detail.into() }
    }
}
