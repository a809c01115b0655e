use super::{check_dim, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a fixed list of parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(block_sizes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update, descending along `grads`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_dim("AdamState::step blocks", self.first_moment.len(), params.len())?;
        check_dim("AdamState::step grads", params.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            check_dim("AdamState::step block", m.len(), p.len())?;
            check_dim("AdamState::step grad", p.len(), g.len())?;
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(&[3], AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        st.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_is_unit_lr() {
        let mut st = AdamState::new(&[1], AdamConfig::with_lr(0.1));
        let mut p = vec![2.0];
        st.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-8);
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let mut st = AdamState::new(&[1], AdamConfig::with_lr(0.05));
        let mut w = vec![1.0];
        let mut prev = w[0];
        for _ in 0..10 {
            let g = 2.0 * w[0];
            st.step(&mut [&mut w], &[&[g]]).unwrap();
            assert!(w[0] < prev);
            prev = w[0];
        }
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn shape_mismatch() {
        let mut st = AdamState::new(&[2], AdamConfig::default());
        let mut p = vec![0.0; 3];
        assert!(st.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
    }
}
