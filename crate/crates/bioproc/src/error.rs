//! Error types, one per subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KineticsError {
    /// A state variable left the representable range during integration.
    #[error("integration failure: {variable} became non-finite at t = {time_h} h")]
    IntegrationFailure { variable: &'static str, time_h: f64 },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("saturation must lie in (0, 100], got {0}")]
    SaturationOutOfRange(f64),

    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time index out of range: {what} = {got} (horizon {horizon})")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        horizon: usize,
    },

    #[error("linearization failed at step {step}: non-finite Jacobian")]
    LinearizationFailure { step: usize },
}

#[derive(Debug, Error)]
pub enum GibbsError {
    #[error("empty dataset: posterior sampling needs at least one trajectory")]
    EmptyDataset,

    #[error("trajectory {index} does not match model dimensions: {detail}")]
    ShapeMismatch { index: usize, detail: String },

    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("malformed box: entry {index} has lower {lower} > upper {upper}")]
    MalformedBox {
        index: usize,
        lower: f64,
        upper: f64,
    },

    #[error("box length {got} does not match parameter count {expected}")]
    BoxLength { got: usize, expected: usize },

    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error("subset enumeration limited to n + m <= {limit}, got {got}")]
    SizeGuard { got: usize, limit: usize },

    #[error("time indices invalid: need h <= t < H - 1, got h = {h}, t = {t}, H = {horizon}")]
    IndexOutOfRange { h: usize, t: usize, horizon: usize },

    #[error("all {0} posterior draws were invalid; no attribution to report")]
    EmptyReport(usize),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
