//! Propensity-based balancing: scores from the learned prior, distances
//! between scores, offline nearest-match tables and the balanced mini-batch
//! sampler.

mod matching;
mod sampler;

pub use matching::{
    load_matches, matches_from_bytes, matches_to_bytes, precompute_matches, save_matches,
    EnvMatches, MatchIndex,
};
pub use sampler::{
    sample_alternates, sample_balanced_batch, semi_balanced_label_dist, BalancedBatch, BatchSpec,
};

use crate::covae::{CoVae, VaeError};
use crate::expfam::{kl_gaussian, log_prior, ExpFamError, ExpFamilyPrior, GaussianParams};
use crate::format::FormatError;
use crate::numkit::{log_sum_exp, Matrix, NumError};
use crate::scmgen::Dataset;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability floor used by the symmetric KL metric.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("environment {env} has no example with label {label}")]
    EmptyCell { env: usize, label: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Prior(#[from] ExpFamError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, BalanceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
    Linf,
    /// Symmetrized categorical KL between propensity vectors.
    Skl,
    /// Symmetrized KL between posterior Gaussians; scores hold `[μ; log σ²]`.
    Posterior,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::L1, Metric::L2, Metric::Linf, Metric::Skl, Metric::Posterior];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Linf => "linf",
            Metric::Skl => "skl",
            Metric::Posterior => "posterior",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = BalanceError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BalanceError::Invalid(format!("unknown metric {s:?}")))
    }
}

/// `s(z) = [p(Y = y | z)]_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingScore {
    pub probs: Vec<f64>,
}

impl BalancingScore {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(BalanceError::Invalid(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self { probs })
    }
}

/// Softmax over `y` of `log p(z | y, env) + log p(y | env)`.
pub fn propensity(
    z: &[f64],
    env: usize,
    prior: &ExpFamilyPrior,
    marginal: &[f64],
) -> Result<BalancingScore> {
    if marginal.len() != prior.m() {
        return Err(BalanceError::LengthMismatch(marginal.len(), prior.m()));
    }
    if marginal.iter().any(|p| !(*p > 0.0)) {
        return Err(BalanceError::Invalid("label marginals must be positive".into()));
    }
    let logits = (0..prior.m())
        .map(|y| Ok(log_prior(z, y, env, prior)? + marginal[y].ln()))
        .collect::<Result<Vec<f64>>>()?;
    let lse = log_sum_exp(&logits)?;
    Ok(BalancingScore {
        probs: logits.iter().map(|l| (l - lse).exp()).collect(),
    })
}

/// Score of one training example: propensity at the posterior mean.
pub fn balancing_score_of(
    model: &CoVae,
    x: &[f64],
    y: usize,
    env: usize,
    marginal: &[f64],
) -> Result<BalancingScore> {
    let q = model.encode(x, y, env)?;
    propensity(&q.mu, env, &model.prior, marginal)
}

pub fn score_distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(BalanceError::LengthMismatch(a.len(), b.len()));
    }
    let diffs = a.iter().zip(b).map(|(x, y)| x - y);
    Ok(match metric {
        Metric::L1 => diffs.map(f64::abs).sum(),
        Metric::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        Metric::Linf => diffs.map(f64::abs).fold(0.0, f64::max),
        // ½[KL(a‖b) + KL(b‖a)] = ½ Σ (a − b)(ln a − ln b)
        Metric::Skl => {
            0.5 * a
                .iter()
                .zip(b)
                .map(|(p, q)| {
                    let (p, q) = (p.max(PROB_FLOOR), q.max(PROB_FLOOR));
                    (p - q) * (p.ln() - q.ln())
                })
                .sum::<f64>()
        }
        Metric::Posterior => {
            if !a.len().is_multiple_of(2) {
                return Err(BalanceError::Invalid("posterior scores hold [μ; log σ²]".into()));
            }
            let split = |v: &[f64]| {
                let n = v.len() / 2;
                GaussianParams {
                    mu: v[..n].to_vec(),
                    log_var: v[n..].to_vec(),
                }
            };
            let (p, q) = (split(a), split(b));
            0.5 * (kl_gaussian(&p, &q)? + kl_gaussian(&q, &p)?)
        }
    })
}

/// One score row per example, per environment, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    /// `(env id, rows × width)`.
    pub envs: Vec<(usize, Matrix)>,
}

impl ScoreTable {
    pub fn env(&self, id: usize) -> Option<&Matrix> {
        self.envs.iter().find(|(e, _)| *e == id).map(|(_, s)| s)
    }
}

/// Propensity scores (or posterior parameters for [`Metric::Posterior`])
/// for every example, using each environment's empirical label marginal.
pub fn compute_scores(model: &CoVae, data: &Dataset, metric: Metric) -> Result<ScoreTable> {
    let mut envs = Vec::with_capacity(data.envs.len());
    for e in &data.envs {
        let marginal = e.label_marginal(data.m);
        if let Some(label) = marginal.iter().position(|&p| p == 0.0) {
            return Err(BalanceError::EmptyCell { env: e.env, label });
        }
        let mut rows = Vec::with_capacity(e.len());
        let mut start = 0;
        while start < e.len() {
            let end = (start + 1024).min(e.len());
            let idx: Vec<usize> = (start..end).collect();
            let (mu, lv) =
                model.encode_batch(&e.x.select_rows(&idx), &e.y[start..end], &vec![e.env; end - start])?;
            for r in 0..idx.len() {
                if metric == Metric::Posterior {
                    rows.push([mu.row(r), lv.row(r)].concat());
                } else {
                    rows.push(propensity(mu.row(r), e.env, &model.prior, &marginal)?.probs);
                }
            }
            start = end;
        }
        let width = if metric == Metric::Posterior { 2 * model.n } else { data.m };
        let table = if rows.is_empty() {
            Matrix::zeros(0, width)
        } else {
            Matrix::from_rows(&rows)?
        };
        envs.push((e.env, table));
    }
    Ok(ScoreTable { envs })
}

/// Scores given by a one-hot encoding of a discrete latent column (the
/// ground-truth covariate), bypassing the encoder.
pub fn latent_one_hot_scores(data: &Dataset, column: usize, values: usize) -> Result<ScoreTable> {
    let mut envs = Vec::with_capacity(data.envs.len());
    for e in &data.envs {
        let lat = e
            .latents
            .as_ref()
            .ok_or_else(|| BalanceError::Invalid(format!("environment {} has no latents", e.env)))?;
        if column >= lat.cols() {
            return Err(BalanceError::Invalid(format!("no latent column {column}")));
        }
        let mut s = Matrix::zeros(e.len(), values);
        for i in 0..e.len() {
            let v = lat.get(i, column);
            if !(v >= 0.0 && (v as usize) < values && v.fract() == 0.0) {
                return Err(BalanceError::Invalid(format!("latent value {v} out of range")));
            }
            s.set(i, v as usize, 1.0);
        }
        envs.push((e.env, s));
    }
    Ok(ScoreTable { envs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    #[test]
    fn symmetric_prior_gives_uniform_score() {
        let prior = ExpFamilyPrior::new(2, 2, 1, 4).unwrap();
        let s = propensity(&[0.3, -1.2], 0, &prior, &[0.25; 4]).unwrap();
        for p in s.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn density_ratio_three_gives_three_quarters() {
        // N(z; 0, 1) / N(z; μ, 1) = 3 at z = ln 3 / μ + μ / 2.
        let mut prior = ExpFamilyPrior::new(1, 1, 1, 2).unwrap();
        let mu = 1.0;
        prior.params_mut(0, 1).unwrap().mu[0] = mu;
        let z = -(3f64.ln()) / mu + mu / 2.0;
        let s = propensity(&[z], 0, &prior, &[0.5, 0.5]).unwrap();
        assert!((s.probs[0] - 0.75).abs() < 1e-12);
        assert!((s.probs[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn propensity_errors() {
        let prior = ExpFamilyPrior::new(1, 1, 1, 2).unwrap();
        assert!(propensity(&[0.0], 1, &prior, &[0.5, 0.5]).is_err());
        assert!(propensity(&[0.0], 0, &prior, &[1.0, 0.0]).is_err());
        assert!(propensity(&[0.0], 0, &prior, &[1.0]).is_err());
    }

    #[test]
    fn scores_sum_to_one_on_random_examples() {
        let mut rng = Rng::new(3);
        let model = CoVae::new(5, 3, 2, 2, 2, &[8], crate::numkit::Activation::Tanh, 2.0, &mut rng)
            .unwrap();
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..5).map(|_| 3.0 * rng.normal()).collect();
            let (y, e) = (rng.below(3), rng.below(2));
            let s = balancing_score_of(&model, &x, y, e, &[0.2, 0.3, 0.5]).unwrap();
            assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(s, balancing_score_of(&model, &x, y, e, &[0.2, 0.3, 0.5]).unwrap());
        }
    }

    #[test]
    fn distance_examples() {
        let a = [0.2, 0.3, 0.5];
        for m in Metric::ALL {
            if m != Metric::Posterior {
                assert_eq!(score_distance(&a, &a, m).unwrap(), 0.0);
            }
        }
        assert_eq!(score_distance(&[1.0, 0.0], &[0.0, 1.0], Metric::Linf).unwrap(), 1.0);
        assert_eq!(score_distance(&[0.1, 0.5], &[0.1, 0.5], Metric::Posterior).unwrap(), 0.0);
        assert!(score_distance(&a, &[0.5, 0.5], Metric::L1).is_err());
        assert!(score_distance(&a, &a, Metric::Posterior).is_err());
    }

    #[test]
    fn skl_matches_definition() {
        let (p, q) = ([0.7, 0.2, 0.1], [0.1, 0.6, 0.3]);
        let kl = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        let want = 0.5 * (kl(&p, &q) + kl(&q, &p));
        assert!((score_distance(&p, &q, Metric::Skl).unwrap() - want).abs() < 1e-14);
        // Zeros are floored, so the distance stays finite.
        assert!(score_distance(&[1.0, 0.0], &[0.0, 1.0], Metric::Skl).unwrap().is_finite());
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
            assert_eq!(Metric::from_code(m.code()), Some(m));
        }
        assert!("kld".parse::<Metric>().is_err());
    }

    fn prob_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn norm_ordering(a in prob_vec(5), b in prob_vec(5)) {
            let l1 = score_distance(&a, &b, Metric::L1).unwrap();
            let l2 = score_distance(&a, &b, Metric::L2).unwrap();
            let li = score_distance(&a, &b, Metric::Linf).unwrap();
            prop_assert!(l1 + 1e-15 >= l2 && l2 + 1e-15 >= li && li >= 0.0);
            let s = score_distance(&a, &b, Metric::Skl).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert!((s - score_distance(&b, &a, Metric::Skl).unwrap()).abs() < 1e-12);
        }
    }
}
