use super::{OracleError, Result};
use crate::balance::{
    precompute_matches, sample_balanced_batch, semi_balanced_label_dist, BatchSpec, Metric, ScoreTable,
};
use crate::numkit::{Matrix, Rng};
use crate::scmgen::{Dataset, DiscreteScm, EnvData};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Report {
    pub m: usize,
    pub a: usize,
    pub anchors: usize,
    /// Empirical in-batch `p̂(Y | score group)`.
    pub empirical: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
    /// Population `p(Y | score group)` of the constructed dataset.
    pub population: Vec<Vec<f64>>,
    pub max_tv: f64,
}

/// Builds a dataset with `per_value` copies of every covariate value whose
/// labels follow `p(Y | Z)` exactly (up to rounding), scores every example
/// by its exact propensity, and tallies balanced batches until `anchors`
/// anchors have been drawn.
pub fn verify_theorem4(
    scm: &DiscreteScm,
    env: usize,
    a: usize,
    per_value: usize,
    anchors: usize,
    seed: u64,
) -> Result<Theorem4Report> {
    scm.validate()?;
    let m = scm.m;
    if env >= scm.n_envs() || a == 0 || a >= m {
        return Err(OracleError::Invalid(format!("need env < {} and 1 <= a < m", scm.n_envs())));
    }
    // Distinct propensity vectors define score groups.
    let props: Vec<Vec<f64>> = (0..scm.n_z).map(|z| scm.propensity(env, z)).collect();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    let group_of: Vec<usize> = props
        .iter()
        .map(|p| match groups.iter().position(|g| g == p) {
            Some(i) => i,
            None => {
                groups.push(p.clone());
                groups.len() - 1
            }
        })
        .collect();

    let mut y = Vec::new();
    let mut rows = Vec::new();
    let mut group = Vec::new();
    for z in 0..scm.n_z {
        if scm.p_z(env, z) == 0.0 {
            continue;
        }
        // Largest-remainder rounding of per_value · p(y | z).
        let raw: Vec<f64> = props[z].iter().map(|p| p * per_value as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&i, &j| (raw[j] - raw[j].floor()).total_cmp(&(raw[i] - raw[i].floor())));
        let short = per_value - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        for (label, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                y.push(label);
                rows.push(props[z].clone());
                group.push(group_of[z]);
            }
        }
    }
    let n = y.len();
    let data = Dataset::new(m, 1, vec![EnvData { env: 0, x: Matrix::zeros(n, 1), y: y.clone(), latents: None }])
        .map_err(OracleError::Scm)?;
    let scores = ScoreTable { envs: vec![(0, Matrix::from_rows(&rows).map_err(|e| OracleError::Invalid(e.to_string()))?)] };
    let index = precompute_matches(&data, &scores, Metric::L1)?;

    let mut population = vec![vec![0.0; m]; groups.len()];
    for (&g, &label) in group.iter().zip(&y) {
        population[g][label] += 1.0;
    }
    for row in population.iter_mut() {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }

    let b = 100.min(anchors.max(1));
    let spec = BatchSpec { b, a, metric: Metric::L1, seed };
    let mut rng = Rng::new(seed);
    let mut tally = vec![vec![0.0; m]; groups.len()];
    let mut drawn = 0;
    while drawn < anchors {
        let batch = sample_balanced_batch(&data, &index, &spec, &mut rng)?;
        for &i in &batch.index {
            tally[group[i]][y[i]] += 1.0;
        }
        drawn += b;
    }
    let empirical: Vec<Vec<f64>> = tally
        .into_iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| if s > 0.0 { v / s } else { 0.0 }).collect()
        })
        .collect();
    let predicted: Vec<Vec<f64>> = population
        .iter()
        .map(|row| row.iter().map(|&p| semi_balanced_label_dist(p, a, m)).collect())
        .collect();
    let max_tv = empirical
        .iter()
        .zip(&predicted)
        .map(|(e, p)| 0.5 * e.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(Theorem4Report { m, a, anchors: drawn, empirical, predicted, population, max_tv })
}
