use super::{check_dim, Matrix, NumError, Result, Rng};
use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity; the last layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Fully connected network. Weight `l` has shape `sizes[l] × sizes[l+1]`,
/// so a batch propagates as `X·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Everything `backward` needs: the input of every layer (`inputs[0]` is the
/// batch itself) and every pre-activation (the last one is the output).
#[derive(Debug, Clone)]
pub struct Trace {
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.pre.last().expect("trace of an MLP with at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient with respect to the network input.
    pub input: Matrix,
}

impl MlpGrads {
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.scale(s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= s);
        }
        self.input.scale(s);
    }

    /// Accumulates parameter gradients (input gradients are not summed).
    pub fn add_params(&mut self, other: &MlpGrads) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            for (a, b) in w.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
        for (w, o) in self.biases.iter_mut().zip(&other.biases) {
            for (a, b) in w.iter_mut().zip(o) {
                *a += b;
            }
        }
    }
}

impl Mlp {
    /// Random initialization: He-uniform for relu hidden layers, Xavier-uniform
    /// for tanh hidden layers and for the linear output layer. Biases start at 0.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        let n_layers = net.weights.len();
        for (l, w) in net.weights.iter_mut().enumerate() {
            let (fan_in, fan_out) = (sizes[l] as f64, sizes[l + 1] as f64);
            let last = l + 1 == n_layers;
            let bound = match (activation, last) {
                (Activation::Relu, false) => (6.0 / fan_in).sqrt(),
                _ => (6.0 / (fan_in + fan_out)).sqrt(),
            };
            for x in w.data_mut() {
                *x = rng.uniform_range(-bound, bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(NumError::DimMismatch {
                context: "Mlp layer count",
                expected: 2,
                got: sizes.len(),
            });
        }
        if sizes.contains(&0) {
            return Err(NumError::Empty("Mlp layer size"));
        }
        let weights = sizes
            .windows(2)
            .map(|w| Matrix::zeros(w[0], w[1]))
            .collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn from_parts(
        activation: Activation,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dim("Mlp::from_parts biases", weights.len(), biases.len())?;
        if weights.is_empty() {
            return Err(NumError::Empty("Mlp::from_parts"));
        }
        let mut sizes = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            check_dim("Mlp::from_parts chain", *sizes.last().unwrap(), w.rows())?;
            check_dim("Mlp::from_parts bias", w.cols(), b.len())?;
            sizes.push(w.cols());
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    /// Σ (in + 1) × out over layers.
    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Sizes of the parameter blocks in `param_blocks_mut` order.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.sizes
            .windows(2)
            .flat_map(|w| [w[0] * w[1], w[1]])
            .collect()
    }

    /// Weight then bias of each layer, in declaration order.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<Trace> {
        check_dim("Mlp::forward input", self.sizes[0], x.cols())?;
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut current = x.clone();
        for l in 0..n_layers {
            let mut z = current.matmul(&self.weights[l])?;
            z.add_row_vector(&self.biases[l])?;
            inputs.push(current);
            if l + 1 < n_layers {
                let mut a = z.clone();
                let act = self.activation;
                a.map_inplace(|v| act.apply(v));
                current = a;
            } else {
                current = Matrix::zeros(0, 0);
            }
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    /// Output only.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut trace = self.forward(x)?;
        Ok(trace.pre.pop().unwrap())
    }

    /// Gradients of a scalar loss given `upstream = ∂loss/∂output`.
    pub fn backward(&self, trace: &Trace, upstream: &Matrix) -> Result<MlpGrads> {
        let n_layers = self.weights.len();
        check_dim("Mlp::backward trace", n_layers, trace.pre.len())?;
        let out = trace.output();
        check_dim("Mlp::backward rows", out.rows(), upstream.rows())?;
        check_dim("Mlp::backward cols", out.cols(), upstream.cols())?;
        let mut weights = vec![Matrix::zeros(0, 0); n_layers];
        let mut biases = vec![Vec::new(); n_layers];
        let mut delta = upstream.clone();
        let mut input = Matrix::zeros(0, 0);
        for l in (0..n_layers).rev() {
            check_dim("Mlp::backward layer", self.sizes[l], trace.inputs[l].cols())?;
            weights[l] = trace.inputs[l].t_matmul(&delta)?;
            biases[l] = delta.sum_rows();
            let mut dx = delta.matmul_t(&self.weights[l])?;
            if l > 0 {
                let act = self.activation;
                let pre = &trace.pre[l - 1];
                for (d, &p) in dx.data_mut().iter_mut().zip(pre.data()) {
                    *d *= act.derivative(p);
                }
                delta = dx;
            } else {
                input = dx;
            }
        }
        Ok(MlpGrads {
            weights,
            biases,
            input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff_check(sizes: &[usize], act: Activation, seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let mut net = Mlp::new(sizes, act, &mut rng).unwrap();
        for b in net.biases_mut() {
            for x in b.iter_mut() {
                *x = rng.uniform_range(-0.5, 0.5);
            }
        }
        let batch = 3;
        let x = Matrix::from_vec(
            batch,
            sizes[0],
            (0..batch * sizes[0]).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let out_dim = *sizes.last().unwrap();
        // Loss = Σ c ⊙ output, with random c.
        let c = Matrix::from_vec(
            batch,
            out_dim,
            (0..batch * out_dim).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let loss = |n: &Mlp| -> f64 {
            let o = n.predict(&x).unwrap();
            o.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        };
        let trace = net.forward(&x).unwrap();
        let grads = net.backward(&trace, &c).unwrap();
        let analytic: Vec<f64> = grads.blocks().concat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut flat_idx = 0;
        let n_blocks = net.block_sizes().len();
        for blk in 0..n_blocks {
            let len = net.block_sizes()[blk];
            for i in 0..len {
                let orig = net.param_blocks()[blk][i];
                net.param_blocks_mut()[blk][i] = orig + h;
                let lp = loss(&net);
                net.param_blocks_mut()[blk][i] = orig - h;
                let lm = loss(&net);
                net.param_blocks_mut()[blk][i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[flat_idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(err);
                flat_idx += 1;
            }
        }
        worst
    }

    #[test]
    fn identity_single_layer() {
        let net = Mlp::from_parts(
            Activation::Relu,
            vec![Matrix::identity(3)],
            vec![vec![0.0; 3]],
        )
        .unwrap();
        let x = Matrix::from_vec(2, 3, vec![1., -2., 3., 0.5, 0.0, -7.]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let mut net = Mlp::zeros(&[4, 5, 2], Activation::Tanh).unwrap();
        net.biases_mut()[1] = vec![0.25, -1.5];
        let mut rng = Rng::new(1);
        let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let out = net.predict(&x).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn hand_set_2_3_2_matches_scalar_evaluation() {
        let w1 = Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let b1 = vec![0.1, -0.2, 0.3];
        let w2 = Matrix::from_vec(3, 2, vec![1.0, -0.5, 0.3, 0.8, -1.2, 0.4]).unwrap();
        let b2 = vec![-0.05, 0.07];
        let net = Mlp::from_parts(Activation::Relu, vec![w1.clone(), w2.clone()], vec![
            b1.clone(),
            b2.clone(),
        ])
        .unwrap();
        let inputs = [[1.0, 2.0], [-0.5, 0.3], [3.0, -1.0]];
        let x = Matrix::from_rows(&inputs).unwrap();
        let out = net.predict(&x).unwrap();
        for (r, inp) in inputs.iter().enumerate() {
            for o in 0..2 {
                let mut acc = b2[o];
                for h in 0..3 {
                    let mut pre = b1[h];
                    for i in 0..2 {
                        pre += inp[i] * w1.get(i, h);
                    }
                    let post = if pre > 0.0 { pre } else { 0.0 };
                    acc += post * w2.get(h, o);
                }
                assert!((out.get(r, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = Rng::new(2);
        let net = Mlp::new(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let x = Matrix::from_vec(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let tr = net.forward(&x).unwrap();
        let g = net.backward(&tr, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_squared_loss_closed_form() {
        let mut rng = Rng::new(3);
        let net = Mlp::new(&[3, 2], Activation::Relu, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let y = Matrix::from_vec(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
        let tr = net.forward(&x).unwrap();
        // loss = ½‖ŷ − y‖² → upstream = ŷ − y
        let mut resid = tr.output().clone();
        for (a, b) in resid.data_mut().iter_mut().zip(y.data()) {
            *a -= b;
        }
        let g = net.backward(&tr, &resid).unwrap();
        let expected = x.transpose().matmul(&resid).unwrap();
        for (a, b) in g.weights[0].data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_check_4_8_3() {
        assert!(finite_diff_check(&[4, 8, 3], Activation::Tanh, 11) < 1e-4);
        assert!(finite_diff_check(&[4, 8, 3], Activation::Relu, 12) < 1e-4);
    }

    #[test]
    fn gradient_check_random_small_nets() {
        let mut rng = Rng::new(99);
        for trial in 0..20 {
            let depth = 2 + rng.below(3);
            let sizes: Vec<usize> = (0..depth).map(|_| 1 + rng.below(6)).collect();
            let act = if trial % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            let err = finite_diff_check(&sizes, act, 1000 + trial);
            assert!(err < 1e-4, "sizes {sizes:?} {act:?}: {err}");
        }
    }

    #[test]
    fn param_count_formula() {
        let net = Mlp::zeros(&[5, 7, 3], Activation::Relu).unwrap();
        assert_eq!(net.param_count(), 6 * 7 + 8 * 3);
        assert_eq!(net.block_sizes().iter().sum::<usize>(), net.param_count());
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[3, 2], Activation::Relu).unwrap();
        assert!(net.forward(&Matrix::zeros(1, 4)).is_err());
        let tr = net.forward(&Matrix::zeros(1, 3)).unwrap();
        assert!(net.backward(&tr, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn seeded_training_is_bit_identical() {
        use crate::numkit::{AdamConfig, AdamState};
        let run = || {
            let mut rng = Rng::new(5);
            let mut net = Mlp::new(&[2, 6, 1], Activation::Tanh, &mut rng).unwrap();
            let mut adam = AdamState::new(&net.block_sizes(), AdamConfig::with_lr(0.01));
            for _ in 0..20 {
                let x = Matrix::from_vec(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
                let tr = net.forward(&x).unwrap();
                let up = tr.output().clone();
                let g = net.backward(&tr, &up).unwrap();
                adam.step(&mut net.param_blocks_mut(), &g.blocks()).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }
}
