use super::{BalanceError, MatchIndex, Metric, Result};
use crate::numkit::{Matrix, Rng};
use crate::scmgen::Dataset;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    /// Anchors per environment.
    pub b: usize,
    /// Alternate labels per anchor, `1 ≤ a ≤ m − 1`.
    pub a: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl BatchSpec {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.b == 0 {
            return Err(BalanceError::Invalid("need at least one anchor per environment".into()));
        }
        if self.a == 0 || self.a >= m {
            return Err(BalanceError::Invalid(format!(
                "alternates per anchor must be in 1..={}, got {}",
                m - 1,
                self.a
            )));
        }
        Ok(())
    }
}

/// Example references in emission order: per environment, each anchor
/// followed by its `a` matches.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedBatch {
    pub env: Vec<usize>,
    pub index: Vec<usize>,
    /// Anchor group of each entry, numbered across the whole batch.
    pub group: Vec<usize>,
}

impl BalancedBatch {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn labels(&self, data: &Dataset) -> Vec<usize> {
        self.env
            .iter()
            .zip(&self.index)
            .map(|(&e, &i)| data.env(e).expect("batch env in dataset").y[i])
            .collect()
    }

    pub fn features(&self, data: &Dataset) -> Matrix {
        let mut out = Matrix::zeros(self.len(), data.dim);
        for (r, (&e, &i)) in self.env.iter().zip(&self.index).enumerate() {
            out.row_mut(r).copy_from_slice(data.env(e).expect("batch env in dataset").x.row(i));
        }
        out
    }
}

/// `a` distinct labels from `{0..m} \ {y}`, sampled without replacement.
pub fn sample_alternates(y: usize, a: usize, m: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..m).filter(|&l| l != y).collect();
    for i in 0..a.min(pool.len()) {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(a);
    pool
}

/// `B` uniformly drawn anchors per environment (with replacement), each
/// followed by its matches for `a` alternate labels.
pub fn sample_balanced_batch(
    data: &Dataset,
    index: &MatchIndex,
    spec: &BatchSpec,
    rng: &mut Rng,
) -> Result<BalancedBatch> {
    spec.validate(data.m)?;
    if !index.covers(data) {
        return Err(BalanceError::Invalid("match index was built for a different dataset".into()));
    }
    let size = spec.b * data.envs.len() * (spec.a + 1);
    let mut batch = BalancedBatch {
        env: Vec::with_capacity(size),
        index: Vec::with_capacity(size),
        group: Vec::with_capacity(size),
    };
    let mut group = 0;
    for e in &data.envs {
        if e.is_empty() {
            return Err(BalanceError::Invalid(format!("environment {} is empty", e.env)));
        }
        for _ in 0..spec.b {
            let anchor = rng.below(e.len());
            batch.env.push(e.env);
            batch.index.push(anchor);
            batch.group.push(group);
            for l in sample_alternates(e.y[anchor], spec.a, data.m, rng) {
                let (j, _) = index
                    .lookup(e.env, anchor, l)
                    .expect("covered index has every alternate slot");
                batch.env.push(e.env);
                batch.index.push(j);
                batch.group.push(group);
            }
            group += 1;
        }
    }
    Ok(batch)
}

/// Label probability inside a balanced batch when the population has
/// `p = p(Y = y | score)`: `(a/(m−1) + (m−a−1)/(m−1)·p) / (a+1)`.
pub fn semi_balanced_label_dist(p: f64, a: usize, m: usize) -> f64 {
    let (a, m) = (a as f64, m as f64);
    (a / (m - 1.0) + (m - a - 1.0) / (m - 1.0) * p) / (a + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        for p in [0.0, 0.3, 1.0] {
            assert!((semi_balanced_label_dist(p, 4, 5) - 0.2).abs() < 1e-15);
        }
        assert!((semi_balanced_label_dist(0.9, 1, 2) - 0.5).abs() < 1e-15);
        assert!((semi_balanced_label_dist(0.5, 4, 10) - 13.0 / 90.0).abs() < 1e-15);
    }

    #[test]
    fn alternates_are_distinct_and_exclude_the_label() {
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let y = rng.below(6);
            let a = 1 + rng.below(5);
            let alt = sample_alternates(y, a, 6, &mut rng);
            assert_eq!(alt.len(), a);
            assert!(!alt.contains(&y));
            let mut s = alt.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), a);
        }
    }

    #[test]
    fn alternate_frequencies_are_uniform() {
        let mut rng = Rng::new(2);
        let draws = 100_000;
        let mut count = [0usize; 5];
        for _ in 0..draws {
            for l in sample_alternates(0, 3, 5, &mut rng) {
                count[l] += 1;
            }
        }
        assert_eq!(count[0], 0);
        for &c in &count[1..] {
            assert!((c as f64 / draws as f64 - 0.75).abs() < 0.01, "{count:?}");
        }
    }

    #[test]
    fn spec_bounds() {
        let spec = |a| BatchSpec { b: 4, a, metric: Metric::Skl, seed: 0 };
        assert!(spec(0).validate(3).is_err());
        assert!(spec(3).validate(3).is_err());
        assert!(spec(2).validate(3).is_ok());
    }
}
