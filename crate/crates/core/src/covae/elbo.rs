use super::{CoVae, Result, VaeError};
use crate::expfam::{kl_gaussian, kl_gaussian_grad, GaussianParams, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::numkit::{Matrix, MlpGrads, Rng};
use crate::scmgen::EnvData;
use std::f64::consts::PI;

/// Examples with their labels and environments.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub env: Vec<usize>,
}

impl Batch {
    pub fn from_env(data: &EnvData, idx: &[usize]) -> Self {
        Self {
            x: data.x.select_rows(idx),
            y: idx.iter().map(|&i| data.y[i]).collect(),
            env: vec![data.env; idx.len()],
        }
    }

    pub fn concat(parts: &[Batch]) -> Self {
        let dim = parts.first().map_or(0, |p| p.x.cols());
        let rows: usize = parts.iter().map(|p| p.len()).sum();
        let mut data = Vec::with_capacity(rows * dim);
        let mut y = Vec::with_capacity(rows);
        let mut env = Vec::with_capacity(rows);
        for p in parts {
            data.extend_from_slice(p.x.data());
            y.extend_from_slice(&p.y);
            env.extend_from_slice(&p.env);
        }
        Self {
            x: Matrix::from_vec(rows, dim, data).expect("consistent widths"),
            y,
            env,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Gradients of the loss `−ELBO`.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
    /// Indexed `env * m + y`.
    pub prior_mu: Vec<Vec<f64>>,
    pub prior_log_var: Vec<Vec<f64>>,
}

impl VaeGrads {
    /// Same order as [`CoVae::param_blocks_mut`].
    pub fn blocks(&self, k: usize) -> Vec<&[f64]> {
        let mut b = self.encoder.blocks();
        b.extend(self.decoder.blocks());
        b.extend(self.prior_mu.iter().map(Vec::as_slice));
        if k == 2 {
            b.extend(self.prior_log_var.iter().map(Vec::as_slice));
        }
        b
    }
}

#[derive(Debug, Clone)]
pub struct ElboOutput {
    /// Weighted mean ELBO.
    pub elbo: f64,
    /// Weighted mean reconstruction log-likelihood.
    pub recon: f64,
    /// Weighted mean KL to the prior.
    pub kl: f64,
    pub grads: VaeGrads,
}

/// One-sample ELBO with an explicit standard-normal `noise` matrix
/// (`batch × n`). `weights` default to `1 / batch`.
pub fn elbo_with_noise(
    model: &CoVae,
    batch: &Batch,
    weights: Option<&[f64]>,
    noise: &Matrix,
) -> Result<ElboOutput> {
    let b = batch.len();
    let (n, m, dim) = (model.n, model.m, model.dim);
    if b == 0 {
        return Err(VaeError::Invalid("empty batch".into()));
    }
    if noise.rows() != b || noise.cols() != n {
        return Err(VaeError::Invalid("noise must be batch × n".into()));
    }
    let uniform;
    let w = match weights {
        Some(w) if w.len() == b => w,
        Some(_) => return Err(VaeError::Invalid("one weight per example".into())),
        None => {
            uniform = vec![1.0 / b as f64; b];
            &uniform
        }
    };

    let enc_in = model.encoder_input(&batch.x, &batch.y, &batch.env)?;
    let enc_trace = model.encoder.forward(&enc_in)?;
    let raw = enc_trace.output();
    let (mu, log_var) = model.split_posterior(raw);

    let mut z = Matrix::zeros(b, n);
    let mut std = Matrix::zeros(b, n);
    for i in 0..b {
        for j in 0..n {
            let s = (log_var.get(i, j) / 2.0).exp();
            std.set(i, j, s);
            z.set(i, j, mu.get(i, j) + s * noise.get(i, j));
        }
    }
    let dec_in = model.decoder_input(&z, &batch.y)?;
    let dec_trace = model.decoder.forward(&dec_in)?;
    let x_hat = dec_trace.output();

    let log_norm = 0.5 * dim as f64 * (2.0 * PI).ln();
    let mut up_dec = Matrix::zeros(b, dim);
    let (mut elbo, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
    let cells = model.n_envs * m;
    let mut prior_mu = vec![vec![0.0; n]; cells];
    let mut prior_log_var = vec![vec![0.0; n]; cells];
    let mut kl_q_mu = Matrix::zeros(b, n);
    let mut kl_q_lv = Matrix::zeros(b, n);
    for i in 0..b {
        let mut sq = 0.0;
        for (d, (xh, x)) in x_hat.row(i).iter().zip(batch.x.row(i)).enumerate() {
            let r = xh - x;
            sq += r * r;
            up_dec.set(i, d, w[i] * r);
        }
        let recon = -0.5 * sq - log_norm;
        let q = GaussianParams {
            mu: mu.row(i).to_vec(),
            log_var: log_var.row(i).to_vec(),
        };
        let p = model.prior.params(batch.env[i], batch.y[i])?;
        let kl = kl_gaussian(&q, p)?;
        let g = kl_gaussian_grad(&q, p)?;
        let cell = batch.env[i] * m + batch.y[i];
        for j in 0..n {
            prior_mu[cell][j] += w[i] * g.p_mu[j];
            prior_log_var[cell][j] += w[i] * g.p_log_var[j];
            kl_q_mu.set(i, j, w[i] * g.q_mu[j]);
            kl_q_lv.set(i, j, w[i] * g.q_log_var[j]);
        }
        recon_sum += w[i] * recon;
        kl_sum += w[i] * kl;
        elbo += w[i] * (recon - kl);
    }
    if !elbo.is_finite() {
        return Err(VaeError::Num(crate::numkit::NumError::NonFinite("elbo")));
    }

    let decoder = model.decoder.backward(&dec_trace, &up_dec)?;
    let enc_width = raw.cols();
    let mut up_enc = Matrix::zeros(b, enc_width);
    for i in 0..b {
        for j in 0..n {
            let dz = decoder.input.get(i, j);
            up_enc.set(i, j, dz + kl_q_mu.get(i, j));
            if model.k == 2 {
                let r = raw.get(i, n + j);
                let inside = (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&r);
                let g = dz * 0.5 * std.get(i, j) * noise.get(i, j) + kl_q_lv.get(i, j);
                up_enc.set(i, n + j, if inside { g } else { 0.0 });
            }
        }
    }
    let encoder = model.encoder.backward(&enc_trace, &up_enc)?;
    if model.k == 1 {
        prior_log_var.iter_mut().for_each(|v| v.iter_mut().for_each(|g| *g = 0.0));
    }
    Ok(ElboOutput {
        elbo,
        recon: recon_sum,
        kl: kl_sum,
        grads: VaeGrads {
            encoder,
            decoder,
            prior_mu,
            prior_log_var,
        },
    })
}

/// Mean one-sample ELBO over `batch` with fresh reparameterization noise.
pub fn elbo(model: &CoVae, batch: &Batch, rng: &mut Rng) -> Result<ElboOutput> {
    let noise = Matrix::from_vec(
        batch.len(),
        model.n,
        (0..batch.len() * model.n).map(|_| rng.normal()).collect(),
    )?;
    elbo_with_noise(model, batch, None, &noise)
}
