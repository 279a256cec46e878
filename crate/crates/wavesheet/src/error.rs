use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("point ({x}, {y}) is within the guard radius of singular point {which}")]
    Singular { x: f64, y: f64, which: usize },
    #[error("branch ambiguity while continuing the root at sample {index}")]
    BranchAmbiguity { index: usize },
    #[error("degenerate tangent: min |z_alpha| = {min_speed:e}")]
    DegenerateTangent { min_speed: f64 },
    #[error("arc-chord functional {sup_f:e} exceeds the limit {limit:e}")]
    ArcChordViolation { sup_f: f64, limit: f64 },
    #[error("evaluation point is too close to the sheet (distance {distance:e})")]
    TooClose { distance: f64 },
    #[error("linear solve did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("input must have zero mean, found {mean:e}")]
    MeanViolation { mean: f64 },
    #[error("zero-flux compatibility violated: flux {flux:e}")]
    Compatibility { flux: f64 },
    #[error("normal-data system has a null space of dimension {dim}")]
    RankDeficient { dim: usize },
    #[error("step rejected at dt = {dt:e}: {reason}")]
    StepRejected { dt: f64, reason: String },
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
