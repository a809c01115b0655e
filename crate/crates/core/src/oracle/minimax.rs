use super::{OracleError, Result, TABLE_SLACK};
use crate::scmgen::{enumerate_discrete, DiscreteScm};
use serde::{Deserialize, Serialize};

/// Candidate environments over a fixed skeleton (`n_z`, `m`, `f`, noise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvGrid {
    pub names: Vec<String>,
    /// `[env][y][z]`.
    pub p_z_given_y: Vec<Vec<Vec<f64>>>,
    pub p_y: Vec<Vec<f64>>,
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

impl EnvGrid {
    pub fn len(&self) -> usize {
        self.p_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_y.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, p_z_given_y: Vec<Vec<f64>>, p_y: Vec<f64>) {
        self.names.push(name.into());
        self.p_z_given_y.push(p_z_given_y);
        self.p_y.push(p_y);
    }

    /// `p(Y)` uniform and `p(Z | Y)` identical across labels.
    pub fn is_balanced(&self, env: usize) -> bool {
        let m = self.p_y[env].len();
        let uniform = self.p_y[env].iter().all(|p| (p - 1.0 / m as f64).abs() <= TABLE_SLACK);
        let rows = &self.p_z_given_y[env];
        uniform
            && rows
                .iter()
                .all(|r| r.iter().zip(&rows[0]).all(|(a, b)| (a - b).abs() <= TABLE_SLACK))
    }

    /// One balanced environment plus label-to-covariate correlations of
    /// increasing strength, each with its reversal, under two label
    /// marginals: `1 + 12 · 2 = 25` environments for `m = 2`, `n_z = 3`.
    ///
    /// Strength `s` puts mass `s` on covariate `y` (reversed: `m − 1 − y`)
    /// and spreads `1 − s` over the rest, so every table stays positive.
    pub fn spurious(n_z: usize, m: usize) -> Result<Self> {
        if n_z < m || m < 2 {
            return Err(OracleError::Invalid(format!("need n_z >= m >= 2 (n_z={n_z}, m={m})")));
        }
        let mut grid = EnvGrid { names: vec![], p_z_given_y: vec![], p_y: vec![] };
        grid.push("balanced", vec![vec![1.0 / n_z as f64; n_z]; m], vec![1.0 / m as f64; m]);
        let skewed = normalized((0..m).map(|y| (m - y) as f64 + 1.0).collect());
        for (marginal_name, py) in [("uniform", vec![1.0 / m as f64; m]), ("skewed", skewed)] {
            for s in [0.5, 0.6, 0.7, 0.8, 0.9, 0.999] {
                for reversed in [false, true] {
                    let rows = (0..m)
                        .map(|y| {
                            let target = if reversed { m - 1 - y } else { y };
                            (0..n_z)
                                .map(|z| if z == target { s } else { (1.0 - s) / (n_z - 1) as f64 })
                                .collect()
                        })
                        .collect();
                    let dir = if reversed { "reversed" } else { "forward" };
                    grid.push(format!("{dir} s={s} p_y={marginal_name}"), rows, py.clone());
                }
            }
        }
        Ok(grid)
    }

    fn scm(&self, skeleton: &DiscreteScm) -> Result<DiscreteScm> {
        let scm = DiscreteScm {
            p_z_given_y: self.p_z_given_y.clone(),
            p_y: self.p_y.clone(),
            ..skeleton.clone()
        };
        scm.validate()?;
        let positive = self.p_y.iter().flatten().all(|&p| p > 0.0)
            && self.p_z_given_y.iter().flatten().flatten().all(|&p| p > 0.0);
        if !positive {
            return Err(OracleError::Invalid("grid tables must be strictly positive".into()));
        }
        Ok(scm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxReport {
    pub names: Vec<String>,
    /// `risk[e][e']`: cross-entropy under env `e'` of env `e`'s Bayes posterior.
    pub risk: Vec<Vec<f64>>,
    pub worst_case: Vec<f64>,
    pub balanced: Vec<usize>,
    pub argmin: usize,
    /// Smallest unbalanced worst case minus the largest balanced worst case.
    pub margin: f64,
    /// Balanced rows beat every other row strictly.
    pub holds: bool,
    /// `risk[e][e] ≤ risk[e'][e]` for all pairs.
    pub own_env_optimal: bool,
}

/// Exact risk matrix of every environment's Bayes classifier across the grid.
pub fn verify_minimax(skeleton: &DiscreteScm, grid: &EnvGrid) -> Result<MinimaxReport> {
    if grid.is_empty() {
        return Err(OracleError::Invalid("empty grid".into()));
    }
    let scm = grid.scm(skeleton)?;
    let m = scm.m;
    let tables = (0..grid.len())
        .map(|e| enumerate_discrete(&scm, e))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let joints: Vec<Vec<f64>> = tables.iter().map(|t| t.marginal_xy()).collect();
    let posteriors: Vec<Vec<Option<Vec<f64>>>> = tables.iter().map(|t| t.posterior_y_given_x()).collect();

    let n = grid.len();
    let mut risk = vec![vec![0.0; n]; n];
    for e in 0..n {
        for e2 in 0..n {
            let mut r = 0.0;
            for x in 0..scm.n_x {
                for y in 0..m {
                    let p = joints[e2][x * m + y];
                    if p == 0.0 {
                        continue;
                    }
                    let q = posteriors[e][x]
                        .as_ref()
                        .ok_or(OracleError::Degenerate { env: e, x })?[y];
                    if q == 0.0 {
                        return Err(OracleError::Degenerate { env: e, x });
                    }
                    r -= p * q.ln();
                }
            }
            risk[e][e2] = r;
        }
    }
    let worst_case: Vec<f64> = risk.iter().map(|row| row.iter().cloned().fold(f64::MIN, f64::max)).collect();
    let argmin = (0..n).fold(0, |b, e| if worst_case[e] < worst_case[b] { e } else { b });
    let balanced: Vec<usize> = (0..n).filter(|&e| grid.is_balanced(e)).collect();
    let (margin, holds) = if balanced.is_empty() {
        (f64::NEG_INFINITY, false)
    } else {
        let bal = balanced.iter().map(|&e| worst_case[e]).fold(f64::MIN, f64::max);
        let other = (0..n)
            .filter(|e| !balanced.contains(e))
            .map(|e| worst_case[e])
            .fold(f64::INFINITY, f64::min);
        let margin = other - bal;
        let equal_within_balanced = balanced
            .iter()
            .all(|&e| (worst_case[e] - worst_case[balanced[0]]).abs() <= TABLE_SLACK);
        (margin, margin > TABLE_SLACK && equal_within_balanced)
    };
    let own_env_optimal = (0..n).all(|e| (0..n).all(|e2| risk[e][e] <= risk[e2][e] + TABLE_SLACK));
    Ok(MinimaxReport {
        names: grid.names.clone(),
        risk,
        worst_case,
        balanced,
        argmin,
        margin,
        holds,
        own_env_optimal,
    })
}
