//! Dense numerical kernel: row-major matrices, a small MLP with manual
//! backpropagation, Adam, stable softmax / log-sum-exp and a seedable
//! counter-based RNG.

mod adam;
mod matrix;
mod mlp;
mod rng;
mod stable;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{Activation, Mlp, MlpGrads, Trace};
pub use rng::{streams, Rng};
pub use stable::{log_softmax, log_sum_exp, softmax};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{context}: dimension mismatch (expected {expected}, got {got})")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("{0}: empty input")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NumError::DimMismatch {
            context,
            expected,
            got,
        })
    }
}
