use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing parameter `{name}` for model family `{family}`")]
    MissingParameter { family: String, name: String },

    #[error("unknown model family `{0}`")]
    UnknownFamily(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("time {0} is not a node of the mesh")]
    NotOnMesh(f64),

    #[error("point (t={t}, x={x:?}) lies outside the field domain")]
    Domain { t: f64, x: Vec<f64> },

    #[error("evaluation failed at t={t}, x={x:?}, z={z:?}: {what}")]
    Evaluation {
        t: f64,
        x: Vec<f64>,
        z: Vec<f64>,
        what: String,
    },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("adjoint unavailable: state-dependent jumps need an inverse jump map with Jacobian")]
    AdjointUnavailable,

    #[error("infeasible problem: {side} marginal charges kernel-null cells {cells:?}")]
    Infeasible { side: &'static str, cells: Vec<usize> },

    #[error("point (t={t}, x={x:?}) is outside the support of h (h <= eta)")]
    OutsideSupport { t: f64, x: Vec<f64> },

    #[error("Sinkhorn did not converge in {iterations} iterations (last residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        residuals: Vec<f64>,
    },

    #[error("terminal function is negative at cell {0}")]
    NegativeTerminal(usize),

    #[error("Brownian increments were not stored with the path ensemble")]
    MissingIncrements,

    #[error("all importance weights are zero")]
    DegenerateWeights,

    #[error("dominating jump rate {rate} is not usable; raise eta or shrink the grid")]
    RateOverflow { rate: f64 },

    #[error("kernel row {0} has no mass on the target grid")]
    EmptyRow(usize),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
