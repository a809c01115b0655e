use super::{env_rng, quantize, Dataset, EnvData, Result, ScmError};
use crate::numkit::{Matrix, Rng};
use nalgebra::DMatrix;

/// Linear-Gaussian SCM: `x = A·[z; onehot(y)] + ε` with
/// `z | y, e ~ N(μ_{e,y}, diag σ²_{e,y})` stored as natural parameters
/// `(μ/σ², −1/(2σ²))` per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScmSpec {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub n_envs: usize,
    /// `d × (n + m)`, full column rank.
    pub mixing: Matrix,
    /// Indexed `env * m + y`; each entry holds `[η₁; η₂]` for every latent
    /// coordinate (length `2n`, first all η₁ then all η₂).
    pub natural: Vec<Vec<f64>>,
    /// p^e(Y) per environment.
    pub label_marginal: Vec<Vec<f64>>,
    pub noise_std: f64,
    /// Upper bound on the condition number of the contrast matrix L.
    pub cond_bound: f64,
}

impl GaussianScmSpec {
    /// Random well-posed instance: orthonormal mixing columns scaled by
    /// `scale`, means in (−2, 2), variances in (0.25, 2.5), uniform labels.
    pub fn random(
        n: usize,
        d: usize,
        m: usize,
        n_envs: usize,
        noise_std: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if d < n + 1 || n == 0 || m < 2 || n_envs == 0 {
            return Err(ScmError::InvalidSpec(format!(
                "need n >= 1, d >= n + 1, m >= 2 (n={n}, d={d}, m={m})"
            )));
        }
        if d < n + m {
            return Err(ScmError::InvalidSpec(format!(
                "an injective mixing of [z; onehot(y)] needs d >= n + m = {}",
                n + m
            )));
        }
        let mut rng = Rng::with_stream(seed, 0x6A55);
        let raw = DMatrix::from_fn(d, n + m, |_, _| rng.normal());
        let q = raw.qr().q();
        let mixing = Matrix::from_vec(
            d,
            n + m,
            (0..d)
                .flat_map(|r| (0..n + m).map(move |c| (r, c)))
                .map(|(r, c)| q[(r, c)] * scale)
                .collect(),
        )?;
        let mut natural = Vec::with_capacity(n_envs * m);
        for _ in 0..n_envs * m {
            let mut eta1 = Vec::with_capacity(n);
            let mut eta2 = Vec::with_capacity(n);
            for _ in 0..n {
                let mu = rng.uniform_range(-2.0, 2.0);
                let var = rng.uniform_range(0.25f64.ln(), 2.5f64.ln()).exp();
                eta1.push(mu / var);
                eta2.push(-0.5 / var);
            }
            eta1.extend(eta2);
            natural.push(eta1);
        }
        let spec = Self {
            n,
            d,
            m,
            n_envs,
            mixing,
            natural,
            label_marginal: vec![vec![1.0 / m as f64; m]; n_envs],
            noise_std,
            cond_bound: 1e6,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Mean and variance of coordinate `i` under `(env, y)`.
    pub fn moments(&self, env: usize, y: usize, i: usize) -> (f64, f64) {
        let nat = &self.natural[env * self.m + y];
        let var = -0.5 / nat[self.n + i];
        (nat[i] * var, var)
    }

    /// `L = [λ(pair_1) − λ(pair_0), …, λ(pair_nk) − λ(pair_0)]` over the first
    /// `nk + 1` (env, label) pairs in lexicographic order; `k = 2` here.
    pub fn contrast_matrix(&self) -> Result<DMatrix<f64>> {
        let nk = 2 * self.n;
        let pairs = self.n_envs * self.m;
        if pairs < nk + 1 {
            return Err(ScmError::InvalidSpec(format!(
                "need m·|E| > nk: {pairs} pairs for nk = {nk}"
            )));
        }
        let base = &self.natural[0];
        Ok(DMatrix::from_fn(nk, nk, |r, c| self.natural[c + 1][r] - base[r]))
    }

    /// Condition number of L (∞ when singular).
    pub fn contrast_condition(&self) -> Result<f64> {
        let sv = self.contrast_matrix()?.singular_values();
        let max = sv.max();
        let min = sv.min();
        Ok(if min > 0.0 { max / min } else { f64::INFINITY })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixing.rows() != self.d || self.mixing.cols() != self.n + self.m {
            return Err(ScmError::InvalidSpec("mixing must be d × (n + m)".into()));
        }
        if self.natural.len() != self.n_envs * self.m
            || self.natural.iter().any(|v| v.len() != 2 * self.n)
        {
            return Err(ScmError::InvalidSpec("natural table has wrong shape".into()));
        }
        if self
            .natural
            .iter()
            .any(|v| v[self.n..].iter().any(|&e2| !(e2 < 0.0)))
        {
            return Err(ScmError::InvalidSpec("η₂ must be negative".into()));
        }
        if self.label_marginal.len() != self.n_envs
            || self
                .label_marginal
                .iter()
                .any(|p| p.len() != self.m || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9)
        {
            return Err(ScmError::InvalidSpec("label marginals must be distributions".into()));
        }
        let a = DMatrix::from_row_slice(self.d, self.n + self.m, self.mixing.data());
        let sv = a.singular_values();
        let (max, min) = (sv.max(), sv.min());
        if !(min > 1e-10 * max.max(1e-300)) {
            return Err(ScmError::RankDeficient { smallest: min });
        }
        let cond = self.contrast_condition()?;
        if !(cond <= self.cond_bound) {
            return Err(ScmError::IllConditioned {
                cond,
                bound: self.cond_bound,
            });
        }
        Ok(())
    }
}

/// `count` samples from environment `env`; `latents` holds the true `z`.
pub fn gen_gaussian_scm(
    spec: &GaussianScmSpec,
    env: usize,
    count: usize,
    seed: u64,
) -> Result<EnvData> {
    spec.validate()?;
    if env >= spec.n_envs {
        return Err(ScmError::InvalidSpec(format!("env {env} >= {}", spec.n_envs)));
    }
    let (n, m, d) = (spec.n, spec.m, spec.d);
    let mut rng = env_rng(seed, env);
    let mut x = Matrix::zeros(count, d);
    let mut z = Matrix::zeros(count, n);
    let mut y = Vec::with_capacity(count);
    let mut cause = vec![0.0; n + m];
    for i in 0..count {
        let label = rng.categorical(&spec.label_marginal[env]);
        cause.iter_mut().for_each(|c| *c = 0.0);
        for k in 0..n {
            let (mu, var) = spec.moments(env, label, k);
            let v = quantize(mu + var.sqrt() * rng.normal());
            z.set(i, k, v);
            cause[k] = v;
        }
        cause[n + label] = 1.0;
        let row = x.row_mut(i);
        for (r, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, &v) in cause.iter().enumerate() {
                acc += spec.mixing.get(r, c) * v;
            }
            *out = quantize(acc + spec.noise_std * rng.normal());
        }
        y.push(label);
    }
    Ok(EnvData {
        env,
        x,
        y,
        latents: Some(z),
    })
}

pub fn gen_gaussian_dataset(spec: &GaussianScmSpec, per_env: usize, seed: u64) -> Result<Dataset> {
    let envs = (0..spec.n_envs)
        .map(|e| gen_gaussian_scm(spec, e, per_env, seed))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(spec.m, spec.d, envs)
}
