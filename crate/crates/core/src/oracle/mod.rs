//! Brute-force checks of the balancing results on enumerable instances,
//! and an affine-fit score for latent recovery.

mod finer;
mod ident;
mod minimax;
mod semi;

pub use finer::{propensity_groups_instance, verify_finer, FinerReport};
pub use ident::{identifiability_score, AffineFit};
pub use minimax::{verify_minimax, EnvGrid, MinimaxReport};
pub use semi::{verify_theorem4, Theorem4Report};

use crate::balance::BalanceError;
use crate::scmgen::ScmError;
use thiserror::Error;

/// Slack for floating-point comparisons of exact table quantities.
pub const TABLE_SLACK: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("observation {x} has zero probability under environment {env} but positive probability elsewhere")]
    Degenerate { env: usize, x: usize },
    #[error("design matrix is rank deficient (smallest singular value {smallest:e})")]
    RankDeficient { smallest: f64 },
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// A named verifier outcome, serialized into JSON reports.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Verdict<T> {
    pub assertion: String,
    pub holds: bool,
    pub margin: f64,
    pub witnesses: T,
}
