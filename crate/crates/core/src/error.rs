use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurriculumError {
    #[error("cannot build {teachers} mutually orthogonal rows in dimension {d_in}")]
    TooManyTeachers { teachers: usize, d_in: usize },
    #[error("similarity must lie in [0, 1), got {0}")]
    Similarity(f64),
    #[error("time {t} is outside the schedule [0, {end})")]
    OutOfRange { t: f64, end: f64 },
    #[error("invalid curriculum: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReducedError {
    #[error("exact solution undefined: radicand {radicand} is negative for cbar={cbar}")]
    Domain { cbar: f64, radicand: f64 },
    #[error("projection basis is not orthogonal (max |cos| = {max_cos:.3e}); Gram matrix {gram:?}")]
    NonOrthogonal { max_cos: f64, gram: [[f64; 2]; 2] },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// A simulation stopped because a parameter became non-finite.
#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[error("numerical abort at t={t} (block {block}): non-finite {param}")]
pub struct NumericalAbort {
    pub t: f64,
    pub block: usize,
    pub param: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Reduced(#[from] ReducedError),
    #[error(transparent)]
    Abort(#[from] NumericalAbort),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
