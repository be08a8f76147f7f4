use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("decay sum diverges: alpha {alpha} must exceed lattice dimension {dim}")]
    NonconvergentSum { alpha: f64, dim: usize },

    #[error("operator windows differ")]
    WindowMismatch,

    #[error("center list is empty")]
    EmptyCenters,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("grid of {grid} points cannot resolve kmax {kmax}")]
    Aliasing { grid: usize, kmax: usize },

    #[error("right-hand side has nonzero average {average:e}")]
    NonzeroAverage { average: f64 },

    #[error("resonant mode {mode:?}: divisor {divisor:e} below floor")]
    ResonantMode { mode: Vec<i64>, divisor: f64 },

    #[error("fixed-point linearization at site {site} is not hyperbolic (trace {trace})")]
    NonHyperbolic { site: usize, trace: f64 },

    #[error("graph transform failed to contract (update {update:e} after {sweeps} sweeps)")]
    ContractionFailure { update: f64, sweeps: usize },

    #[error("hyperbolic series diverges (rate {rate})")]
    SeriesDivergence { rate: f64 },

    #[error("embedding is degenerate: DK^T DK is singular")]
    DegenerateEmbedding,

    #[error("twist average is singular (|det| = {det:e})")]
    DegenerateTwist { det: f64 },

    #[error("parameter average is singular (|det| = {det:e})")]
    DegenerateParameter { det: f64 },

    #[error("Newton iteration did not converge; error history {history:?}")]
    NoConvergence { history: Vec<f64> },

    #[error("integration step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("singular linear system")]
    SingularSystem,

    #[error("target rotation number {target} is not attainable in the libration well")]
    UnattainableRotation { target: f64 },

    #[error("stage {stage} failed: {reason}")]
    StageFailure { stage: usize, reason: String },

    #[error("continuation broke down after eps = {last_good}: {reason}")]
    ContinuationBreakdown { last_good: f64, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported state schema version {0}")]
    VersionMismatch(u32),

    #[error("corrupted state file: {0}")]
    CorruptState(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
