//! Analysis pipelines for the three bundled replications: psychometric
//! threshold estimation, movement PCA with rank tests, and Fitts' law
//! regression. Everything here is a pure function over in-memory data.

pub mod exec;
pub mod fitts;
pub mod pca;
pub mod pipelines;
pub mod psychometric;
pub mod ranktest;
pub mod regression;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("too few observations: {0}")]
    TooFew(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("rank-deficient design: {} collinear with earlier columns", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("no compliant fits to aggregate")]
    NoCompliantFits,
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

pub use exec::Exec;
