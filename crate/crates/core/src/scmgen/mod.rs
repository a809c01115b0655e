//! Synthetic multi-environment data: a colored-pattern generator with a
//! spurious color channel, a linear-Gaussian SCM with known latents, a fully
//! enumerable discrete SCM, and the on-disk dataset format.

mod colored;
mod discrete;
mod gaussian;
pub mod idx;
mod io;

pub use colored::{
    gen_colored, gen_colored_at, gen_colored_balanced, gen_colored_balanced_at,
    gen_colored_dataset, ColoredSpec, COLOR_COLUMN, TRUE_CLASS_COLUMN,
};
pub use discrete::{enumerate_discrete, sample_discrete, DiscreteScm, JointTable};
pub use gaussian::{gen_gaussian_dataset, gen_gaussian_scm, GaussianScmSpec};
pub use io::{
    dataset_from_bytes, dataset_to_bytes, read_dataset, read_latents, write_dataset,
    write_latents,
};

use crate::format::FormatError;
use crate::numkit::{Matrix, NumError, Rng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("mixing matrix is rank deficient (smallest singular value {smallest:e})")]
    RankDeficient { smallest: f64 },
    #[error("contrast matrix L is ill-conditioned (condition number {cond:e} > bound {bound:e})")]
    IllConditioned { cond: f64, bound: f64 },
    #[error("environment {0} has no examples")]
    EmptyEnv(usize),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, ScmError>;

/// One labelled example, borrowed from an [`EnvData`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub y: usize,
    pub env: usize,
}

/// All examples of one environment. Ground-truth latents, when the generator
/// knows them, sit in a separate matrix and never inside `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvData {
    pub env: usize,
    pub x: Matrix,
    pub y: Vec<usize>,
    pub latents: Option<Matrix>,
}

impl EnvData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            x: self.x.row(i),
            y: self.y[i],
            env: self.env,
        }
    }

    pub fn label_counts(&self, m: usize) -> Vec<usize> {
        let mut c = vec![0; m];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    /// Empirical p(Y) in this environment.
    pub fn label_marginal(&self, m: usize) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.label_counts(m)
            .into_iter()
            .map(|c| c as f64 / n)
            .collect()
    }

    /// Example indices grouped by label, each group in increasing order.
    pub fn indices_by_label(&self, m: usize) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); m];
        for (i, &y) in self.y.iter().enumerate() {
            g[y].push(i);
        }
        g
    }

    pub fn subset(&self, idx: &[usize]) -> EnvData {
        EnvData {
            env: self.env,
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            latents: self.latents.as_ref().map(|l| l.select_rows(idx)),
        }
    }
}

/// Environment-partitioned collection; `envs` is ordered by environment id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub m: usize,
    pub dim: usize,
    pub envs: Vec<EnvData>,
}

impl Dataset {
    pub fn new(m: usize, dim: usize, mut envs: Vec<EnvData>) -> Result<Self> {
        if m < 2 {
            return Err(ScmError::InvalidSpec(format!("need m >= 2 classes, got {m}")));
        }
        envs.sort_by_key(|e| e.env);
        for w in envs.windows(2) {
            if w[0].env == w[1].env {
                return Err(ScmError::InvalidSpec(format!(
                    "environment {} appears twice",
                    w[0].env
                )));
            }
        }
        for e in &envs {
            if e.is_empty() {
                return Err(ScmError::EmptyEnv(e.env));
            }
            if e.x.cols() != dim || e.x.rows() != e.len() {
                return Err(ScmError::InvalidSpec(format!(
                    "environment {} features are {}x{}, expected {}x{dim}",
                    e.env,
                    e.x.rows(),
                    e.x.cols(),
                    e.len()
                )));
            }
            if let Some(&y) = e.y.iter().find(|&&y| y >= m) {
                return Err(ScmError::InvalidSpec(format!(
                    "label {y} out of range for m = {m}"
                )));
            }
            if let Some(l) = &e.latents {
                if l.rows() != e.len() {
                    return Err(ScmError::InvalidSpec("latent rows != examples".into()));
                }
            }
        }
        Ok(Self { m, dim, envs })
    }

    pub fn env_ids(&self) -> Vec<usize> {
        self.envs.iter().map(|e| e.env).collect()
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn n_examples(&self) -> usize {
        self.envs.iter().map(|e| e.len()).sum()
    }

    pub fn env(&self, id: usize) -> Option<&EnvData> {
        self.envs.iter().find(|e| e.env == id)
    }

    pub fn examples(&self) -> impl Iterator<Item = Example<'_>> {
        self.envs
            .iter()
            .flat_map(|e| (0..e.len()).map(move |i| e.example(i)))
    }

    /// `(env, label)` pairs with no examples.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for e in &self.envs {
            for (y, c) in e.label_counts(self.m).into_iter().enumerate() {
                if c == 0 {
                    out.push((e.env, y));
                }
            }
        }
        out
    }

    pub fn has_latents(&self) -> bool {
        self.envs.iter().all(|e| e.latents.is_some())
    }

    /// Holds out `fraction` of every environment (shuffled with `rng`).
    pub fn split_validation(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(ScmError::InvalidSpec(format!(
                "validation fraction {fraction} not in [0, 1)"
            )));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for e in &self.envs {
            let mut idx: Vec<usize> = (0..e.len()).collect();
            rng.shuffle(&mut idx);
            let n_val = ((e.len() as f64) * fraction).round() as usize;
            let n_val = n_val.min(e.len().saturating_sub(1));
            let (v, t) = idx.split_at(n_val);
            let mut t = t.to_vec();
            let mut v = v.to_vec();
            t.sort_unstable();
            v.sort_unstable();
            train.push(e.subset(&t));
            if !v.is_empty() {
                val.push(e.subset(&v));
            }
        }
        Ok((
            Dataset {
                m: self.m,
                dim: self.dim,
                envs: train,
            },
            Dataset {
                m: self.m,
                dim: self.dim,
                envs: val,
            },
        ))
    }
}

/// Rounds through `f32` so values survive the on-disk format bit-exactly.
#[inline]
pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

pub(crate) fn env_rng(seed: u64, env: usize) -> Rng {
    Rng::with_stream(
        Rng::derive_seed(seed, env as u64),
        crate::numkit::streams::DATA,
    )
}
