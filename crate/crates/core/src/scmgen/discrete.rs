use super::{Result, ScmError};
use crate::numkit::Rng;

/// Fully enumerable SCM over finite `𝒵`, `𝒴` and `𝒳`:
/// `p^e(x, y, z) = Σ_c p(x | c) · [c = f(y, z)] · p^e(z | y) · p^e(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm {
    pub n_z: usize,
    pub m: usize,
    pub n_x: usize,
    /// `[env][y][z]`
    pub p_z_given_y: Vec<Vec<Vec<f64>>>,
    /// `[env][y]`
    pub p_y: Vec<Vec<f64>>,
    /// Clean observation index `f[y * n_z + z]`, injective into `0..n_x`.
    pub f: Vec<usize>,
    /// Row-stochastic `n_x × n_x` channel `p(x_obs | x_clean)`.
    pub noise: Vec<Vec<f64>>,
}

const STOCHASTIC_TOL: f64 = 1e-12;

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&v| v >= 0.0 && v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= STOCHASTIC_TOL
}

impl DiscreteScm {
    /// Observations are `(noisy label, z)` pairs: `f(y, z) = y·n_z + z`, and
    /// the channel replaces the label part by a uniform other label with
    /// probability `label_noise` while keeping `z`.
    pub fn label_noise_channel(
        n_z: usize,
        m: usize,
        label_noise: f64,
        p_z_given_y: Vec<Vec<Vec<f64>>>,
        p_y: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_x = n_z * m;
        let f = (0..n_x).collect();
        let mut noise = vec![vec![0.0; n_x]; n_x];
        for y in 0..m {
            for z in 0..n_z {
                let c = y * n_z + z;
                for y_obs in 0..m {
                    noise[c][y_obs * n_z + z] = if y_obs == y {
                        1.0 - label_noise
                    } else {
                        label_noise / (m - 1) as f64
                    };
                }
            }
        }
        let scm = Self {
            n_z,
            m,
            n_x,
            p_z_given_y,
            p_y,
            f,
            noise,
        };
        scm.validate()?;
        Ok(scm)
    }

    pub fn n_envs(&self) -> usize {
        self.p_y.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(ScmError::InvalidSpec(s.to_string()));
        if self.p_z_given_y.len() != self.p_y.len() {
            return bad("p(Z|Y) and p(Y) disagree on environment count");
        }
        for (pz, py) in self.p_z_given_y.iter().zip(&self.p_y) {
            if py.len() != self.m || !is_distribution(py) {
                return bad("p(Y) must be a distribution over m labels");
            }
            if pz.len() != self.m || pz.iter().any(|row| row.len() != self.n_z || !is_distribution(row)) {
                return bad("p(Z|Y) rows must be distributions over 𝒵");
            }
        }
        if self.f.len() != self.m * self.n_z || self.f.iter().any(|&c| c >= self.n_x) {
            return bad("f must map every (y, z) into 𝒳");
        }
        let mut seen = vec![false; self.n_x];
        for &c in &self.f {
            if seen[c] {
                return bad("f must be injective");
            }
            seen[c] = true;
        }
        if self.noise.len() != self.n_x
            || self.noise.iter().any(|row| row.len() != self.n_x || !is_distribution(row))
        {
            return bad("noise channel must be row-stochastic n_x × n_x");
        }
        Ok(())
    }

    /// Exact propensity vector `p^e(Y | Z = z)`.
    pub fn propensity(&self, env: usize, z: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..self.m)
            .map(|y| self.p_y[env][y] * self.p_z_given_y[env][y][z])
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| if s > 0.0 { v / s } else { 0.0 }).collect()
    }

    /// `p^e(Z = z)`.
    pub fn p_z(&self, env: usize, z: usize) -> f64 {
        (0..self.m)
            .map(|y| self.p_y[env][y] * self.p_z_given_y[env][y][z])
            .sum()
    }
}

/// Exact joint `p(X, Y, Z | E = env)`, indexed `(x·m + y)·n_z + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub n_x: usize,
    pub m: usize,
    pub n_z: usize,
    pub p: Vec<f64>,
}

impl JointTable {
    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.p[(x * self.m + y) * self.n_z + z]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    /// `p(x, y)` summed over z, indexed `x·m + y`.
    pub fn marginal_xy(&self) -> Vec<f64> {
        self.p.chunks_exact(self.n_z).map(|c| c.iter().sum()).collect()
    }

    /// `p(y, z)`, indexed `y·n_z + z`.
    pub fn marginal_yz(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.n_z];
        for x in 0..self.n_x {
            for y in 0..self.m {
                for z in 0..self.n_z {
                    out[y * self.n_z + z] += self.get(x, y, z);
                }
            }
        }
        out
    }

    /// Bayes posterior `p(Y | X = x)` for every x; rows with zero mass are
    /// left as `None`.
    pub fn posterior_y_given_x(&self) -> Vec<Option<Vec<f64>>> {
        let xy = self.marginal_xy();
        xy.chunks_exact(self.m)
            .map(|row| {
                let s: f64 = row.iter().sum();
                (s > 0.0).then(|| row.iter().map(|v| v / s).collect())
            })
            .collect()
    }
}

pub fn enumerate_discrete(scm: &DiscreteScm, env: usize) -> Result<JointTable> {
    scm.validate()?;
    if env >= scm.n_envs() {
        return Err(ScmError::InvalidSpec(format!("env {env} out of range")));
    }
    let (m, n_z, n_x) = (scm.m, scm.n_z, scm.n_x);
    let mut p = vec![0.0; n_x * m * n_z];
    for y in 0..m {
        for z in 0..n_z {
            let w = scm.p_y[env][y] * scm.p_z_given_y[env][y][z];
            if w == 0.0 {
                continue;
            }
            let clean = scm.f[y * n_z + z];
            for (x, &px) in scm.noise[clean].iter().enumerate() {
                p[(x * m + y) * n_z + z] += w * px;
            }
        }
    }
    Ok(JointTable { n_x, m, n_z, p })
}

/// Ancestral sampling of `(x, y, z)` triples.
pub fn sample_discrete(
    scm: &DiscreteScm,
    env: usize,
    count: usize,
    rng: &mut Rng,
) -> Vec<(usize, usize, usize)> {
    (0..count)
        .map(|_| {
            let y = rng.categorical(&scm.p_y[env]);
            let z = rng.categorical(&scm.p_z_given_y[env][y]);
            let x = rng.categorical(&scm.noise[scm.f[y * scm.n_z + z]]);
            (x, y, z)
        })
        .collect()
}
