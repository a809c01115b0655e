use super::elbo::{elbo_with_noise, Batch};
use super::{CoVae, Result, VaeError};
use crate::expfam::latent_dim_rule;
use crate::numkit::{streams, Activation, AdamConfig, AdamState, Matrix, Rng};
use crate::scmgen::Dataset;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub lr: f64,
    /// Examples per environment per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Upper bound on the latent dimension from the pair-count rule.
    pub cap: usize,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Overrides the pair-count rule when set.
    pub latent_dim: Option<usize>,
    pub prior_scale: f64,
    /// Examples per environment in the fixed evaluation subset.
    pub eval_size: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            cap: 16,
            k: 1,
            hidden: vec![512, 512],
            activation: Activation::Relu,
            latent_dim: None,
            prior_scale: 1.0,
            eval_size: 512,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(VaeError::Invalid(s.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.cap == 0 || self.eval_size == 0 {
            return bad("batch_size, epochs, cap and eval_size must be positive");
        }
        if !(self.k == 1 || self.k == 2) {
            return bad("k must be 1 or 2");
        }
        if self.latent_dim == Some(0) || self.hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(self.prior_scale >= 0.0 && self.prior_scale.is_finite()) {
            return bad("prior_scale must be non-negative");
        }
        Ok(())
    }

    pub fn latent_dim_for(&self, m: usize, n_envs: usize) -> Result<usize> {
        match self.latent_dim {
            Some(n) => Ok(n),
            None => Ok(latent_dim_rule(m, n_envs, self.k, self.cap)?),
        }
    }
}

/// ELBO curve entry; epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-batch ELBO over the epoch (evaluation ELBO at epoch 0).
    pub train_elbo: f64,
    /// ELBO on the fixed evaluation subset with fixed noise.
    pub eval_elbo: f64,
    pub eval_kl: f64,
}

struct EnvCursor {
    order: Vec<usize>,
    pos: usize,
}

impl EnvCursor {
    fn take(&mut self, count: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            let end = (self.pos + count - out.len()).min(self.order.len());
            out.extend_from_slice(&self.order[self.pos..end]);
            self.pos = end;
        }
        out
    }
}

/// Every example gets weight `1 / (n_envs · batch_e)`: the mean over
/// environments of the per-environment mean ELBO.
fn env_weights(parts: &[Batch]) -> Vec<f64> {
    let e = parts.len() as f64;
    parts
        .iter()
        .flat_map(|p| std::iter::repeat_n(1.0 / (e * p.len() as f64), p.len()))
        .collect()
}

fn noise(rows: usize, n: usize, rng: &mut Rng) -> Result<Matrix> {
    Ok(Matrix::from_vec(rows, n, (0..rows * n).map(|_| rng.normal()).collect())?)
}

/// Trains on every environment of `data`, whose ids must be `0..n_envs`.
pub fn train_vae(data: &Dataset, config: &VaeTrainConfig) -> Result<(CoVae, Vec<EpochRecord>)> {
    config.validate()?;
    let ids = data.env_ids();
    if ids.is_empty() || ids.iter().enumerate().any(|(i, &e)| i != e) {
        return Err(VaeError::Invalid(format!(
            "training environments must be numbered 0..n, got {ids:?}"
        )));
    }
    if let Some(e) = data.envs.iter().find(|e| e.is_empty()) {
        return Err(VaeError::Invalid(format!("environment {} is empty", e.env)));
    }
    let n_envs = ids.len();
    let n = config.latent_dim_for(data.m, n_envs)?;
    let mut init_rng = Rng::with_stream(config.seed, streams::VAE_INIT);
    let mut model = CoVae::new(
        data.dim,
        data.m,
        n_envs,
        n,
        config.k,
        &config.hidden,
        config.activation,
        config.prior_scale,
        &mut init_rng,
    )?;

    let eval_parts: Vec<Batch> = data
        .envs
        .iter()
        .map(|e| {
            let idx: Vec<usize> = (0..e.len().min(config.eval_size)).collect();
            Batch::from_env(e, &idx)
        })
        .collect();
    let eval_weights = env_weights(&eval_parts);
    let eval_batch = Batch::concat(&eval_parts);
    let eval_noise = noise(
        eval_batch.len(),
        n,
        &mut Rng::with_stream(config.seed, streams::EVAL),
    )?;
    let evaluate = |model: &CoVae| elbo_with_noise(model, &eval_batch, Some(&eval_weights), &eval_noise);

    let initial = evaluate(&model)?;
    let mut log = vec![EpochRecord {
        epoch: 0,
        train_elbo: initial.elbo,
        eval_elbo: initial.elbo,
        eval_kl: initial.kl,
    }];

    let mut rng = Rng::with_stream(config.seed, streams::VAE_TRAIN);
    let mut cursors: Vec<EnvCursor> = data
        .envs
        .iter()
        .map(|e| {
            let mut order: Vec<usize> = (0..e.len()).collect();
            rng.shuffle(&mut order);
            EnvCursor { order, pos: 0 }
        })
        .collect();
    let largest = data.envs.iter().map(|e| e.len()).max().unwrap_or(0);
    let steps = largest.div_ceil(config.batch_size);
    let mut adam = AdamState::new(&model.block_sizes(), AdamConfig::with_lr(config.lr));

    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let parts: Vec<Batch> = data
                .envs
                .iter()
                .zip(cursors.iter_mut())
                .map(|(e, c)| {
                    let take = config.batch_size.min(e.len());
                    Batch::from_env(e, &c.take(take, &mut rng))
                })
                .collect();
            let weights = env_weights(&parts);
            let batch = Batch::concat(&parts);
            let eta = noise(batch.len(), n, &mut rng)?;
            let out = match elbo_with_noise(&model, &batch, Some(&weights), &eta) {
                Ok(o) if o.elbo.is_finite() => o,
                Ok(_) | Err(VaeError::Num(_)) => {
                    return Err(VaeError::NonFinite { epoch, batch: step })
                }
                Err(e) => return Err(e),
            };
            debug_assert!(out.kl >= 0.0);
            let grads = out.grads.blocks(config.k);
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(VaeError::NonFinite { epoch, batch: step });
            }
            adam.step(&mut model.param_blocks_mut(), &grads)?;
            model.prior.clamp();
            total += out.elbo;
        }
        let ev = evaluate(&model).map_err(|_| VaeError::NonFinite { epoch, batch: steps })?;
        log.push(EpochRecord {
            epoch,
            train_elbo: total / steps as f64,
            eval_elbo: ev.elbo,
            eval_kl: ev.kl,
        });
    }
    Ok((model, log))
}
