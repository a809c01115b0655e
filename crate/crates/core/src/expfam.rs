//! Conditional factorial exponential-family prior `p^e(Z | Y)`, realized as
//! a diagonal Gaussian per (environment, label). With `k = 1` the sufficient
//! statistic is `z` and the variance is frozen at one; with `k = 2` it is
//! `(z, z²)` and both moments are free.

use crate::numkit::Rng;
use std::f64::consts::PI;
use thiserror::Error;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpFamError {
    #[error("prior has no entry for (env {env}, label {y})")]
    UnknownCell { env: usize, y: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("sufficient-statistic dimension k must be 1 or 2, got {0}")]
    InvalidK(usize),
    #[error("too few (label, environment) pairs: m·|E| = {pairs} leaves no latent dimension for k = {k}")]
    TooFewPairs { pairs: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, ExpFamError>;

/// Diagonal Gaussian with clamped log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(ExpFamError::LengthMismatch {
                expected: mu.len(),
                got: log_var.len(),
            });
        }
        let mut p = Self { mu, log_var };
        p.clamp();
        Ok(p)
    }

    pub fn standard(n: usize) -> Self {
        Self {
            mu: vec![0.0; n],
            log_var: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn clamp(&mut self) {
        for lv in &mut self.log_var {
            *lv = lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        }
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_len(self.len(), z.len())?;
        Ok(z.iter()
            .zip(&self.mu)
            .zip(&self.log_var)
            .map(|((&z, &mu), &lv)| log_normal(z, mu, lv))
            .sum())
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(ExpFamError::LengthMismatch { expected, got })
    }
}

/// `log N(z; mu, exp(log_var))`.
#[inline]
pub fn log_normal(z: f64, mu: f64, log_var: f64) -> f64 {
    let d = z - mu;
    -0.5 * ((2.0 * PI).ln() + log_var + d * d * (-log_var).exp())
}

/// Table of per-(env, label) Gaussians, indexed `env * m + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpFamilyPrior {
    n: usize,
    k: usize,
    n_envs: usize,
    m: usize,
    table: Vec<GaussianParams>,
}

impl ExpFamilyPrior {
    /// Standard-normal entries everywhere.
    pub fn new(n: usize, k: usize, n_envs: usize, m: usize) -> Result<Self> {
        if k != 1 && k != 2 {
            return Err(ExpFamError::InvalidK(k));
        }
        Ok(Self {
            n,
            k,
            n_envs,
            m,
            table: vec![GaussianParams::standard(n); n_envs * m],
        })
    }

    /// Means drawn from `N(0, scale²)`; variances stay at one.
    pub fn new_random(
        n: usize,
        k: usize,
        n_envs: usize,
        m: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut p = Self::new(n, k, n_envs, m)?;
        for g in &mut p.table {
            for mu in &mut g.mu {
                *mu = scale * rng.normal();
            }
        }
        Ok(p)
    }

    pub fn from_table(
        n: usize,
        k: usize,
        n_envs: usize,
        m: usize,
        table: Vec<GaussianParams>,
    ) -> Result<Self> {
        let mut p = Self::new(n, k, n_envs, m)?;
        check_len(n_envs * m, table.len())?;
        for g in &table {
            check_len(n, g.len())?;
            if k == 1 && g.log_var.iter().any(|&lv| lv != 0.0) {
                return Err(ExpFamError::InvalidK(k));
            }
        }
        p.table = table;
        p.table.iter_mut().for_each(GaussianParams::clamp);
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_envs(&self) -> usize {
        self.n_envs
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn table(&self) -> &[GaussianParams] {
        &self.table
    }

    /// Raw table access for optimizers; see [`ExpFamilyPrior::params_mut`].
    pub(crate) fn table_mut(&mut self) -> &mut [GaussianParams] {
        &mut self.table
    }

    fn slot(&self, env: usize, y: usize) -> Result<usize> {
        if env < self.n_envs && y < self.m {
            Ok(env * self.m + y)
        } else {
            Err(ExpFamError::UnknownCell { env, y })
        }
    }

    pub fn params(&self, env: usize, y: usize) -> Result<&GaussianParams> {
        Ok(&self.table[self.slot(env, y)?])
    }

    /// Mutable access; callers must keep `log_var` at zero when `k = 1` and
    /// call [`ExpFamilyPrior::clamp`] after updates.
    pub fn params_mut(&mut self, env: usize, y: usize) -> Result<&mut GaussianParams> {
        let s = self.slot(env, y)?;
        Ok(&mut self.table[s])
    }

    pub fn clamp(&mut self) {
        let k = self.k;
        for g in &mut self.table {
            if k == 1 {
                g.log_var.iter_mut().for_each(|lv| *lv = 0.0);
            }
            g.clamp();
        }
    }

    /// Sufficient statistics `T(z)`: `z` for k = 1, `(z, z²)` for k = 2.
    pub fn sufficient_stats(&self, z: &[f64]) -> Vec<f64> {
        sufficient_stats(z, self.k)
    }

    /// Natural parameters λ^e(y): `μ/σ²` then (k = 2) `−1/(2σ²)` per coordinate.
    pub fn natural_params(&self, env: usize, y: usize) -> Result<Vec<f64>> {
        let g = self.params(env, y)?;
        let mut out: Vec<f64> = g
            .mu
            .iter()
            .zip(&g.log_var)
            .map(|(mu, lv)| mu * (-lv).exp())
            .collect();
        if self.k == 2 {
            out.extend(g.log_var.iter().map(|lv| -0.5 * (-lv).exp()));
        }
        Ok(out)
    }
}

pub fn sufficient_stats(z: &[f64], k: usize) -> Vec<f64> {
    let mut t = z.to_vec();
    if k == 2 {
        t.extend(z.iter().map(|v| v * v));
    }
    t
}

/// `log p^e(z | y) = Σ_i log N(z_i; μ_i, σ²_i)`.
pub fn log_prior(z: &[f64], y: usize, env: usize, prior: &ExpFamilyPrior) -> Result<f64> {
    prior.params(env, y)?.log_density(z)
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    check_len(q.len(), p.len())?;
    let mut kl = 0.0;
    for i in 0..q.len() {
        let (mq, lq, mp, lp) = (q.mu[i], q.log_var[i], p.mu[i], p.log_var[i]);
        let d = mq - mp;
        kl += 0.5 * ((lq - lp).exp() + d * d * (-lp).exp() - 1.0 + lp - lq);
    }
    Ok(kl)
}

/// Partial derivatives of [`kl_gaussian`].
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrad {
    pub q_mu: Vec<f64>,
    pub q_log_var: Vec<f64>,
    pub p_mu: Vec<f64>,
    pub p_log_var: Vec<f64>,
}

pub fn kl_gaussian_grad(q: &GaussianParams, p: &GaussianParams) -> Result<KlGrad> {
    check_len(q.len(), p.len())?;
    let n = q.len();
    let mut g = KlGrad {
        q_mu: vec![0.0; n],
        q_log_var: vec![0.0; n],
        p_mu: vec![0.0; n],
        p_log_var: vec![0.0; n],
    };
    for i in 0..n {
        let (mq, lq, mp, lp) = (q.mu[i], q.log_var[i], p.mu[i], p.log_var[i]);
        let d = mq - mp;
        let inv_vp = (-lp).exp();
        let ratio = (lq - lp).exp();
        g.q_mu[i] = d * inv_vp;
        g.p_mu[i] = -d * inv_vp;
        g.q_log_var[i] = 0.5 * (ratio - 1.0);
        g.p_log_var[i] = 0.5 * (1.0 - ratio - d * d * inv_vp);
    }
    Ok(g)
}

/// Largest latent dimension with `m·|E| > n·k`, capped at `cap`.
pub fn latent_dim_rule(m: usize, n_train_envs: usize, k: usize, cap: usize) -> Result<usize> {
    if k == 0 {
        return Err(ExpFamError::InvalidK(k));
    }
    let pairs = m * n_train_envs;
    let mut n = pairs / k;
    if n * k == pairs {
        n = n.saturating_sub(1);
    }
    let n = n.min(cap);
    if n < 1 {
        return Err(ExpFamError::TooFewPairs { pairs, k });
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(rng: &mut Rng, n: usize) -> GaussianParams {
        GaussianParams::new(
            (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect(),
            (0..n).map(|_| rng.uniform_range(-1.5, 1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = ExpFamilyPrior::new(1, 1, 1, 2).unwrap();
        let v = log_prior(&[0.0], 0, 0, &p).unwrap();
        assert!((v - (-0.5 * (2.0 * PI).ln())).abs() < 1e-15);
        assert!((v + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn mode_is_maximum() {
        let mut rng = Rng::new(3);
        let g = random_params(&mut rng, 3);
        let peak = g.log_density(&g.mu).unwrap();
        for _ in 0..100 {
            let z: Vec<f64> = g.mu.iter().map(|m| m + 0.1 * rng.normal()).collect();
            assert!(g.log_density(&z).unwrap() < peak);
        }
    }

    #[test]
    fn factorizes_over_coordinates() {
        let mut rng = Rng::new(4);
        let g = random_params(&mut rng, 3);
        let z: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let separate: f64 = (0..3)
            .map(|i| {
                let var = g.log_var[i].exp();
                let d = z[i] - g.mu[i];
                -(2.0 * PI * var).sqrt().ln() - d * d / (2.0 * var)
            })
            .sum();
        assert!((g.log_density(&z).unwrap() - separate).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let g = random_params(&mut rng, 1);
            let sd = (g.log_var[0] / 2.0).exp();
            let (lo, hi) = (g.mu[0] - 8.0 * sd, g.mu[0] + 8.0 * sd);
            let steps = 4000;
            let h = (hi - lo) / steps as f64;
            let f = |z: f64| g.log_density(&[z]).unwrap().exp();
            let mut acc = 0.5 * (f(lo) + f(hi));
            for s in 1..steps {
                acc += f(lo + s as f64 * h);
            }
            assert!((acc * h - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn kl_examples() {
        let p = GaussianParams::standard(1);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        let q = GaussianParams::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian(&q, &GaussianParams::standard(2)).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = Rng::new(6);
        let q = random_params(&mut rng, 2);
        let p = random_params(&mut rng, 2);
        let exact = kl_gaussian(&q, &p).unwrap();
        let n = 1_000_000;
        let mut acc = 0.0;
        let mut z = vec![0.0; 2];
        for _ in 0..n {
            for i in 0..2 {
                z[i] = q.mu[i] + (q.log_var[i] / 2.0).exp() * rng.normal();
            }
            acc += q.log_density(&z).unwrap() - p.log_density(&z).unwrap();
        }
        let mc = acc / n as f64;
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_equality() {
        let mut rng = Rng::new(7);
        for _ in 0..1000 {
            let q = random_params(&mut rng, 3);
            let p = random_params(&mut rng, 3);
            assert!(kl_gaussian(&q, &p).unwrap() > 0.0);
            assert!(kl_gaussian(&q, &q).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn kl_grad_matches_finite_difference() {
        let mut rng = Rng::new(8);
        let q = random_params(&mut rng, 2);
        let p = random_params(&mut rng, 2);
        let g = kl_gaussian_grad(&q, &p).unwrap();
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for i in 0..2 {
            let bump = |which: usize, d: f64| {
                let (mut q2, mut p2) = (q.clone(), p.clone());
                match which {
                    0 => q2.mu[i] += d,
                    1 => q2.log_var[i] += d,
                    2 => p2.mu[i] += d,
                    _ => p2.log_var[i] += d,
                }
                kl_gaussian(&q2, &p2).unwrap()
            };
            let expect = [g.q_mu[i], g.q_log_var[i], g.p_mu[i], g.p_log_var[i]];
            for (which, &e) in expect.iter().enumerate() {
                let num = fd(&|d| bump(which, d));
                assert!((num - e).abs() < 1e-6 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn latent_dim_rule_table() {
        assert_eq!(latent_dim_rule(2, 2, 1, 16).unwrap(), 3);
        assert_eq!(latent_dim_rule(10, 2, 1, 16).unwrap(), 16);
        assert_eq!(latent_dim_rule(65, 3, 2, 64).unwrap(), 64);
        assert_eq!(latent_dim_rule(5, 3, 2, 64).unwrap(), 7);
        assert_eq!(latent_dim_rule(10, 3, 2, 64).unwrap(), 14);
        assert!(matches!(
            latent_dim_rule(1, 1, 1, 16),
            Err(ExpFamError::TooFewPairs { .. })
        ));
    }

    #[test]
    fn unknown_cell_and_clamp() {
        let mut p = ExpFamilyPrior::new(2, 2, 2, 3).unwrap();
        assert!(matches!(
            log_prior(&[0.0, 0.0], 3, 0, &p),
            Err(ExpFamError::UnknownCell { env: 0, y: 3 })
        ));
        assert!(log_prior(&[0.0, 0.0], 0, 2, &p).is_err());
        p.params_mut(1, 1).unwrap().log_var[0] = -50.0;
        p.clamp();
        assert_eq!(p.params(1, 1).unwrap().log_var[0], LOG_VAR_MIN);
        assert!(ExpFamilyPrior::new(1, 3, 1, 2).is_err());
    }

    #[test]
    fn natural_params_layout() {
        let mut p = ExpFamilyPrior::new(1, 2, 1, 2).unwrap();
        *p.params_mut(0, 1).unwrap() = GaussianParams::new(vec![2.0], vec![2f64.ln()]).unwrap();
        let lam = p.natural_params(0, 1).unwrap();
        assert!((lam[0] - 1.0).abs() < 1e-15);
        assert!((lam[1] + 0.25).abs() < 1e-15);
        assert_eq!(p.sufficient_stats(&[3.0]), vec![3.0, 9.0]);
    }
}
