//! Conditional VAE with encoder `q(Z | X, Y, E)`, decoder `x̂ = f(Z, Y)` under
//! unit-variance Gaussian observation noise, and the per-(env, label)
//! exponential-family prior from [`crate::expfam`].

mod elbo;
mod io;
mod train;

pub use elbo::{elbo, elbo_with_noise, Batch, ElboOutput, VaeGrads};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model};
pub use train::{train_vae, EpochRecord, VaeTrainConfig};

use crate::expfam::{ExpFamError, ExpFamilyPrior, GaussianParams, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::format::FormatError;
use crate::numkit::{Activation, Matrix, Mlp, NumError, Rng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Prior(#[from] ExpFamError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, VaeError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CoVae {
    /// `[x; onehot(y); onehot(env)] → [μ; log σ²]` (just `μ` when k = 1).
    pub encoder: Mlp,
    /// `[z; onehot(y)] → x̂`.
    pub decoder: Mlp,
    pub prior: ExpFamilyPrior,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub dim: usize,
    pub n_envs: usize,
}

pub(crate) fn one_hot_into(row: &mut [f64], idx: usize) {
    row.iter_mut().for_each(|v| *v = 0.0);
    row[idx] = 1.0;
}

impl CoVae {
    pub fn new(
        dim: usize,
        m: usize,
        n_envs: usize,
        n: usize,
        k: usize,
        hidden: &[usize],
        activation: Activation,
        prior_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n == 0 || dim == 0 || m < 2 || n_envs == 0 {
            return Err(VaeError::Invalid(format!(
                "need n, dim, n_envs >= 1 and m >= 2 (n={n}, dim={dim}, m={m}, envs={n_envs})"
            )));
        }
        let out = if k == 1 { n } else { 2 * n };
        let mut enc_sizes = vec![dim + m + n_envs];
        enc_sizes.extend_from_slice(hidden);
        enc_sizes.push(out);
        let mut dec_sizes = vec![n + m];
        dec_sizes.extend_from_slice(hidden);
        dec_sizes.push(dim);
        let encoder = Mlp::new(&enc_sizes, activation, rng)?;
        let decoder = Mlp::new(&dec_sizes, activation, rng)?;
        let prior = ExpFamilyPrior::new_random(n, k, n_envs, m, prior_scale, rng)?;
        let model = Self {
            encoder,
            decoder,
            prior,
            n,
            k,
            m,
            dim,
            n_envs,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let enc_out = if self.k == 1 { self.n } else { 2 * self.n };
        let ok = self.encoder.input_dim() == self.dim + self.m + self.n_envs
            && self.encoder.output_dim() == enc_out
            && self.decoder.input_dim() == self.n + self.m
            && self.decoder.output_dim() == self.dim
            && self.prior.n() == self.n
            && self.prior.k() == self.k
            && self.prior.m() == self.m
            && self.prior.n_envs() == self.n_envs;
        if ok {
            Ok(())
        } else {
            Err(VaeError::Invalid("inconsistent CoVae component shapes".into()))
        }
    }

    pub fn encoder_input(&self, x: &Matrix, y: &[usize], env: &[usize]) -> Result<Matrix> {
        if x.cols() != self.dim || x.rows() != y.len() || y.len() != env.len() {
            return Err(VaeError::Invalid(format!(
                "encoder input: x is {}x{}, expected {}x{}",
                x.rows(),
                x.cols(),
                y.len(),
                self.dim
            )));
        }
        let width = self.dim + self.m + self.n_envs;
        let mut out = Matrix::zeros(x.rows(), width);
        for i in 0..x.rows() {
            if y[i] >= self.m || env[i] >= self.n_envs {
                return Err(VaeError::Prior(ExpFamError::UnknownCell {
                    env: env[i],
                    y: y[i],
                }));
            }
            let row = out.row_mut(i);
            row[..self.dim].copy_from_slice(x.row(i));
            one_hot_into(&mut row[self.dim..self.dim + self.m], y[i]);
            one_hot_into(&mut row[self.dim + self.m..], env[i]);
        }
        Ok(out)
    }

    pub fn decoder_input(&self, z: &Matrix, y: &[usize]) -> Result<Matrix> {
        if z.cols() != self.n || z.rows() != y.len() {
            return Err(VaeError::Invalid("decoder input shape".into()));
        }
        let mut out = Matrix::zeros(z.rows(), self.n + self.m);
        for i in 0..z.rows() {
            let row = out.row_mut(i);
            row[..self.n].copy_from_slice(z.row(i));
            one_hot_into(&mut row[self.n..], y[i]);
        }
        Ok(out)
    }

    /// Splits raw encoder output into posterior means and clamped
    /// log-variances (zero when k = 1).
    pub(crate) fn split_posterior(&self, raw: &Matrix) -> (Matrix, Matrix) {
        let mu = raw.col_slice(0, self.n);
        let log_var = if self.k == 1 {
            Matrix::zeros(raw.rows(), self.n)
        } else {
            let mut lv = raw.col_slice(self.n, self.n);
            lv.map_inplace(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
            lv
        };
        (mu, log_var)
    }

    /// Posterior means and log-variances for a batch.
    pub fn encode_batch(&self, x: &Matrix, y: &[usize], env: &[usize]) -> Result<(Matrix, Matrix)> {
        let input = self.encoder_input(x, y, env)?;
        let raw = self.encoder.predict(&input)?;
        Ok(self.split_posterior(&raw))
    }

    pub fn encode(&self, x: &[f64], y: usize, env: usize) -> Result<GaussianParams> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let (mu, lv) = self.encode_batch(&xm, &[y], &[env])?;
        Ok(GaussianParams {
            mu: mu.into_vec(),
            log_var: lv.into_vec(),
        })
    }

    /// Posterior means for every example of a dataset environment, in order.
    pub fn posterior_means(&self, x: &Matrix, y: &[usize], env: usize) -> Result<Matrix> {
        const CHUNK: usize = 1024;
        let mut out = Matrix::zeros(x.rows(), self.n);
        let mut start = 0;
        while start < x.rows() {
            let end = (start + CHUNK).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let (mu, _) = self.encode_batch(&x.select_rows(&idx), &y[start..end], &vec![env; end - start])?;
            for (r, i) in idx.iter().enumerate() {
                out.row_mut(*i).copy_from_slice(mu.row(r));
            }
            start = end;
        }
        Ok(out)
    }

    pub fn decode(&self, z: &Matrix, y: &[usize]) -> Result<Matrix> {
        Ok(self.decoder.predict(&self.decoder_input(z, y)?)?)
    }

    /// `z = μ + exp(log σ² / 2) ⊙ η`, `η ~ N(0, I)`.
    pub fn reparameterize(params: &GaussianParams, rng: &mut Rng) -> Vec<f64> {
        params
            .mu
            .iter()
            .zip(&params.log_var)
            .map(|(mu, lv)| mu + (lv / 2.0).exp() * rng.normal())
            .collect()
    }

    /// Parameter blocks: encoder, decoder, prior means, then (k = 2) prior
    /// log-variances.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let k = self.k;
        let mut blocks = self.encoder.param_blocks_mut();
        blocks.extend(self.decoder.param_blocks_mut());
        let (mus, lvs): (Vec<_>, Vec<_>) = self
            .prior
            .table_mut()
            .iter_mut()
            .map(|g| (g.mu.as_mut_slice(), g.log_var.as_mut_slice()))
            .unzip();
        blocks.extend(mus);
        if k == 2 {
            blocks.extend(lvs);
        }
        blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut s = self.encoder.block_sizes();
        s.extend(self.decoder.block_sizes());
        let cells = self.n_envs * self.m;
        s.extend(std::iter::repeat_n(self.n, cells));
        if self.k == 2 {
            s.extend(std::iter::repeat_n(self.n, cells));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize, seed: u64) -> CoVae {
        CoVae::new(3, 2, 2, 2, k, &[5], Activation::Tanh, 0.5, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn output_widths() {
        assert_eq!(tiny(2, 1).encoder.output_dim(), 4);
        assert_eq!(tiny(1, 1).encoder.output_dim(), 2);
        assert_eq!(tiny(1, 1).decoder.output_dim(), 3);
    }

    #[test]
    fn zero_encoder_returns_bias() {
        let mut m = tiny(2, 2);
        for w in m.encoder.weights_mut() {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let last = m.encoder.biases().len() - 1;
        m.encoder.biases_mut()[last] = vec![0.3, -0.7, 1.1, -2.0];
        for (x, y, e) in [([1.0, 2.0, 3.0], 0, 0), ([-5.0, 0.0, 9.0], 1, 1)] {
            let p = m.encode(&x, y, e).unwrap();
            assert_eq!(p.mu, vec![0.3, -0.7]);
            assert_eq!(p.log_var, vec![1.1, -2.0]);
        }
    }

    #[test]
    fn environment_is_wired_in() {
        let m = tiny(2, 3);
        let a = m.encode(&[0.5, -0.5, 1.0], 1, 0).unwrap();
        let b = m.encode(&[0.5, -0.5, 1.0], 1, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let m = tiny(2, 4);
        assert!(m.encode(&[0.0; 4], 0, 0).is_err());
        assert!(m.encode(&[0.0; 3], 2, 0).is_err());
        assert!(m.encode(&[0.0; 3], 0, 2).is_err());
    }

    #[test]
    fn reparameterize_degenerate_and_mean() {
        let p = GaussianParams::new(vec![1.5, -2.0], vec![LOG_VAR_MIN, LOG_VAR_MIN]).unwrap();
        let mut rng = Rng::new(5);
        // At the floor σ = e^-5 ≈ 0.0067: the deviation has RMS below 1e-2.
        let draws = 1000;
        let mut sq = [0.0; 2];
        for _ in 0..draws {
            let z = CoVae::reparameterize(&p, &mut rng);
            sq[0] += (z[0] - 1.5).powi(2);
            sq[1] += (z[1] + 2.0).powi(2);
        }
        assert!(sq.iter().all(|s| (s / draws as f64).sqrt() < 1e-2));
        let p = GaussianParams::new(vec![0.7], vec![0.4]).unwrap();
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| CoVae::reparameterize(&p, &mut rng)[0])
            .sum::<f64>()
            / n as f64;
        let sd = (0.4f64 / 2.0).exp();
        assert!((mean - 0.7).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn block_sizes_match_blocks() {
        for k in [1, 2] {
            let mut m = tiny(k, 6);
            let sizes = m.block_sizes();
            let blocks = m.param_blocks_mut();
            assert_eq!(sizes, blocks.iter().map(|b| b.len()).collect::<Vec<_>>());
        }
    }
}
