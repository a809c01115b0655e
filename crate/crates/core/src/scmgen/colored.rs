use super::{env_rng, quantize, Dataset, EnvData, Result, ScmError};
use crate::numkit::{Matrix, Rng};
use serde::{Deserialize, Serialize};

/// Latent column holding the color index.
pub const COLOR_COLUMN: usize = 0;
/// Latent column holding the class before label noise.
pub const TRUE_CLASS_COLUMN: usize = 1;

/// Colored-pattern generator. Features are `[pattern(true class) + noise;
/// intensity · onehot(color) + noise]`; the observed label is the true class
/// with `label_noise` corruption, and the color follows the observed label
/// except with probability `flip[env]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredSpec {
    pub m: usize,
    /// Color-replacement probability per training environment.
    pub flip: Vec<f64>,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    pub pattern_dim: usize,
    pub n_per_env: usize,
    /// Distance between any two class patterns.
    #[serde(default = "default_pattern_scale")]
    pub pattern_scale: f64,
    #[serde(default = "default_noise")]
    pub pattern_noise: f64,
    #[serde(default = "default_intensity")]
    pub color_intensity: f64,
    #[serde(default)]
    pub pattern_seed: u64,
}

fn default_label_noise() -> f64 {
    0.25
}
fn default_pattern_scale() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_intensity() -> f64 {
    3.0
}

impl ColoredSpec {
    /// Binary setting with training environments `{0.1, 0.2}`.
    pub fn binary(n_per_env: usize) -> Self {
        Self {
            m: 2,
            flip: vec![0.1, 0.2],
            label_noise: default_label_noise(),
            pattern_dim: 8,
            n_per_env,
            pattern_scale: default_pattern_scale(),
            pattern_noise: default_noise(),
            color_intensity: default_intensity(),
            pattern_seed: 0,
        }
    }

    /// Ten-class variant with the same environments.
    pub fn ten_class(n_per_env: usize) -> Self {
        Self {
            m: 10,
            pattern_dim: 16,
            ..Self::binary(n_per_env)
        }
    }

    pub fn dim(&self) -> usize {
        self.pattern_dim + self.m
    }

    pub fn n_envs(&self) -> usize {
        self.flip.len()
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.m < 2 {
            return Err(ScmError::InvalidSpec(format!("m = {} < 2", self.m)));
        }
        if self.m > u16::MAX as usize {
            return Err(ScmError::InvalidSpec("m exceeds u16 labels".into()));
        }
        if !self.flip.iter().all(|&p| prob(p)) || !prob(self.label_noise) {
            return Err(ScmError::InvalidSpec("probabilities must lie in [0, 1]".into()));
        }
        if self.pattern_dim == 0 || self.n_per_env == 0 {
            return Err(ScmError::InvalidSpec("pattern_dim and n_per_env must be positive".into()));
        }
        if !(self.pattern_noise >= 0.0 && self.pattern_scale >= 0.0 && self.color_intensity >= 0.0)
        {
            return Err(ScmError::InvalidSpec("scales must be non-negative".into()));
        }
        Ok(())
    }

    /// Fixed class patterns. When `m ≤ pattern_dim` they are orthogonal with
    /// pairwise distance exactly `pattern_scale`.
    pub fn patterns(&self) -> Vec<Vec<f64>> {
        let mut rng = Rng::with_stream(self.pattern_seed, 0x9A77);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.m);
        let norm = self.pattern_scale / 2f64.sqrt();
        for _ in 0..self.m {
            let mut v: Vec<f64> = (0..self.pattern_dim).map(|_| rng.normal()).collect();
            if out.len() < self.pattern_dim {
                for u in &out {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
                    for (a, b) in v.iter_mut().zip(u) {
                        *a -= dot * b;
                    }
                }
            }
            let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a *= norm / len);
            out.push(v);
        }
        out
    }
}

fn other_than(rng: &mut Rng, m: usize, exclude: usize) -> usize {
    let k = rng.below(m - 1);
    if k >= exclude {
        k + 1
    } else {
        k
    }
}

fn generate(
    spec: &ColoredSpec,
    flip: Option<f64>,
    env: usize,
    n: usize,
    seed: u64,
) -> Result<EnvData> {
    spec.validate()?;
    if let Some(p) = flip {
        if !(0.0..=1.0).contains(&p) {
            return Err(ScmError::InvalidSpec(format!("flip {p} not in [0, 1]")));
        }
    }
    let m = spec.m;
    let dim = spec.dim();
    let patterns = spec.patterns();
    let mut rng = env_rng(seed, env);
    let mut x = Matrix::zeros(n, dim);
    let mut y = Vec::with_capacity(n);
    let mut latents = Matrix::zeros(n, 2);
    for i in 0..n {
        let true_class = rng.below(m);
        let label = if rng.bernoulli(spec.label_noise) {
            other_than(&mut rng, m, true_class)
        } else {
            true_class
        };
        let color = match flip {
            Some(p) if !rng.bernoulli(p) => label,
            Some(_) => other_than(&mut rng, m, label),
            None => rng.below(m),
        };
        let row = x.row_mut(i);
        for (d, p) in patterns[true_class].iter().enumerate() {
            row[d] = quantize(p + spec.pattern_noise * rng.normal());
        }
        for c in 0..m {
            let base = if c == color { spec.color_intensity } else { 0.0 };
            row[spec.pattern_dim + c] = quantize(base + spec.pattern_noise * rng.normal());
        }
        y.push(label);
        latents.set(i, COLOR_COLUMN, color as f64);
        latents.set(i, TRUE_CLASS_COLUMN, true_class as f64);
    }
    Ok(EnvData {
        env,
        x,
        y,
        latents: Some(latents),
    })
}

/// Training environment `env` of `spec`, `spec.n_per_env` examples.
pub fn gen_colored(spec: &ColoredSpec, env: usize, seed: u64) -> Result<EnvData> {
    let flip = *spec
        .flip
        .get(env)
        .ok_or_else(|| ScmError::InvalidSpec(format!("no flip probability for env {env}")))?;
    generate(spec, Some(flip), env, spec.n_per_env, seed)
}

/// Arbitrary flip probability (used for test environments and sweeps).
pub fn gen_colored_at(
    spec: &ColoredSpec,
    flip: f64,
    env: usize,
    n: usize,
    seed: u64,
) -> Result<EnvData> {
    generate(spec, Some(flip), env, n, seed)
}

/// Color drawn uniformly, independent of the label.
pub fn gen_colored_balanced(spec: &ColoredSpec, env: usize, seed: u64) -> Result<EnvData> {
    generate(spec, None, env, spec.n_per_env, seed)
}

pub fn gen_colored_balanced_at(
    spec: &ColoredSpec,
    env: usize,
    n: usize,
    seed: u64,
) -> Result<EnvData> {
    generate(spec, None, env, n, seed)
}

/// Every training environment of `spec`.
pub fn gen_colored_dataset(spec: &ColoredSpec, seed: u64) -> Result<Dataset> {
    let envs = (0..spec.n_envs())
        .map(|e| gen_colored(spec, e, seed))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(spec.m, spec.dim(), envs)
}
