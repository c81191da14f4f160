use thiserror::Error;

/// Everything that can go wrong inside the library.
///
/// Solver failures carry the best iterate found so far, so callers can
/// inspect how close the run got before giving up.
#[derive(Error, Debug)]
pub enum TfwError {
    #[error("grid size must be even and at least 4, got n = {n}")]
    BadGridSize { n: usize },

    #[error("cell length must be positive and finite, got L = {l}")]
    BadDomain { l: f64 },

    #[error("grids do not match: {context}")]
    GridMismatch { context: String },

    #[error(
        "Poisson source is not neutral: |mean| = {mean_abs:.3e} exceeds {tol:.1e} * rms = {limit:.3e}"
    )]
    NonNeutralSource {
        mean_abs: f64,
        limit: f64,
        tol: f64,
    },

    #[error("nucleus profile radius {r0} must be smaller than half the cell ({half_l})")]
    ShapeTooWide { r0: f64, half_l: f64 },

    #[error("nucleus {index} has no grid support (profile radius {r0} too small for spacing {h})")]
    ShapeUnresolved { index: usize, r0: f64, h: f64 },

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error(
        "ground-state iteration hit the limit ({max_iter}) with residual {residual:.3e} > {tol:.1e}"
    )]
    MaxIterExceeded {
        max_iter: usize,
        residual: f64,
        tol: f64,
        best: Box<crate::ground_state::GroundState>,
    },

    #[error("iterate left the positive cone and energy descent stalled (min v = {min_v:.3e})")]
    NegativeDensity { min_v: f64 },

    #[error("linear solver stagnated after {iterations} iterations (residual {residual:.3e} > {tol:.1e}); operator singular or state far from a minimizer")]
    SingularOperator {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    #[error("operation requires at least one discrete nucleus")]
    EmptyConfiguration,

    #[error("perturbation density must integrate to zero: got {integral:.3e}")]
    NonNeutralPerturbation { integral: f64 },

    #[error("decay fit needs at least {needed} usable points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("malformed field file at byte {offset}: {what}")]
    FormatError { offset: u64, what: String },

    #[error("field file version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TfwError>;
