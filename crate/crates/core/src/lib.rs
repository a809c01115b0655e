//! Balanced mini-batch sampling for multi-environment classification.
//!
//! The pipeline learns a latent covariate with a conditional VAE whose prior
//! is a per-(environment, label) exponential family, turns the prior into a
//! propensity vector per example, matches every example against examples of
//! the other labels with the nearest propensity, and trains a classifier on
//! mini-batches assembled from those matches. Brute-force verifiers for the
//! underlying balancing results live in [`oracle`].

pub mod numkit;
pub mod format;
pub mod scmgen;
pub mod expfam;
pub mod covae;
pub mod balance;
pub mod trainer;
pub mod oracle;
pub mod pipeline;
