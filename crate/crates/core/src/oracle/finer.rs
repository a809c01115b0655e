use super::{OracleError, Result, TABLE_SLACK};
use crate::numkit::Rng;
use crate::scmgen::DiscreteScm;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinerReport {
    /// `Y ⫫ Z | b(Z)` in the environment.
    pub is_balancing: bool,
    /// The propensity vector is constant on every level set of `b`.
    pub is_finer: bool,
}

impl FinerReport {
    pub fn agrees(&self) -> bool {
        self.is_balancing == self.is_finer
    }
}

/// Checks a candidate score `b`, given as a level id per covariate value,
/// against the exact joint `p(Y, Z)` of `env`. Covariate values with zero
/// probability are ignored.
pub fn verify_finer(scm: &DiscreteScm, env: usize, b: &[usize]) -> Result<FinerReport> {
    scm.validate()?;
    if env >= scm.n_envs() || b.len() != scm.n_z {
        return Err(OracleError::Invalid("b needs one level per covariate value".into()));
    }
    let m = scm.m;
    let levels = b.iter().max().map_or(0, |v| v + 1);
    let joint = |y: usize, z: usize| scm.p_y[env][y] * scm.p_z_given_y[env][y][z];
    let mut level_joint = vec![vec![0.0; m]; levels];
    for z in 0..scm.n_z {
        for y in 0..m {
            level_joint[b[z]][y] += joint(y, z);
        }
    }
    let level_cond: Vec<Vec<f64>> = level_joint
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|v| if s > 0.0 { v / s } else { 0.0 }).collect()
        })
        .collect();
    let support: Vec<usize> = (0..scm.n_z).filter(|&z| scm.p_z(env, z) > 0.0).collect();
    let props: Vec<Vec<f64>> = (0..scm.n_z).map(|z| scm.propensity(env, z)).collect();

    // p(y | z) = p(y | b(z)) for every supported z.
    let is_balancing = support.iter().all(|&z| {
        props[z]
            .iter()
            .zip(&level_cond[b[z]])
            .all(|(p, q)| (p - q).abs() <= TABLE_SLACK)
    });
    let is_finer = support.iter().all(|&z1| {
        support
            .iter()
            .filter(|&&z2| b[z2] == b[z1])
            .all(|&z2| props[z1].iter().zip(&props[z2]).all(|(p, q)| (p - q).abs() <= TABLE_SLACK))
    });
    Ok(FinerReport { is_balancing, is_finer })
}

/// Random single-environment instance whose covariate values fall into
/// `groups` propensity classes, with the class of each value. Distinct
/// classes have propensity vectors at least `0.05` apart in every label.
pub fn propensity_groups_instance(
    n_z: usize,
    m: usize,
    groups: usize,
    rng: &mut Rng,
) -> Result<(DiscreteScm, Vec<usize>)> {
    if groups == 0 || groups > n_z || m < 2 {
        return Err(OracleError::Invalid("need 1 <= groups <= n_z and m >= 2".into()));
    }
    // Propensities on a grid keep distinct classes well separated.
    let mut props: Vec<Vec<f64>> = Vec::new();
    while props.len() < groups {
        let w: Vec<f64> = (0..m).map(|_| 1.0 + rng.below(8) as f64).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        if props.iter().all(|q| q.iter().zip(&p).any(|(a, b)| (a - b).abs() > 0.05)) {
            props.push(p);
        }
    }
    let mut class: Vec<usize> = (0..n_z).map(|z| if z < groups { z } else { rng.below(groups) }).collect();
    rng.shuffle(&mut class);
    let p_z: Vec<f64> = {
        let w: Vec<f64> = (0..n_z).map(|_| 0.2 + rng.uniform()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    };
    let joint: Vec<Vec<f64>> = (0..m)
        .map(|y| (0..n_z).map(|z| p_z[z] * props[class[z]][y]).collect())
        .collect();
    let p_y: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let p_z_given_y = joint
        .iter()
        .zip(&p_y)
        .map(|(r, py)| r.iter().map(|v| v / py).collect())
        .collect();
    let scm = DiscreteScm::label_noise_channel(n_z, m, 0.1, vec![p_z_given_y], vec![p_y])?;
    Ok((scm, class))
}
