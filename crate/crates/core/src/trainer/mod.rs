//! Cross-entropy classifier training with random, matched-balanced or
//! oracle-balanced mini-batches, plus evaluation helpers.

mod io;
mod sampler;

pub use io::{classifier_from_bytes, classifier_to_bytes, load_classifier, save_classifier};
pub use sampler::{BatchSource, OracleCells};

use crate::balance::{BalanceError, MatchIndex};
use crate::format::FormatError;
use crate::numkit::{log_softmax, streams, Activation, AdamConfig, AdamState, Matrix, Mlp, NumError, Rng};
use crate::scmgen::{gen_colored_at, ColoredSpec, Dataset, EnvData, ScmError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the balanced sampler needs a match index")]
    MissingMatchIndex,
    #[error("oracle sampling needs latent column {0} in every training environment")]
    MissingLatents(usize),
    #[error("environment {env} has no example with latent value {value} and label {label}")]
    EmptyOracleCell { env: usize, value: usize, label: usize },
    #[error("cannot evaluate an empty slice")]
    Empty,
    #[error("non-finite loss at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Data(#[from] ScmError),
    #[error(transparent)]
    Format(FormatError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn one() -> f64 {
    1.0
}

/// Mini-batch source. `beta` is the fraction of each environment's batch
/// made of balanced groups; the rest is drawn uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Random,
    /// Groups resolved through a precomputed [`MatchIndex`].
    Balanced {
        a: usize,
        #[serde(default = "one")]
        beta: f64,
    },
    /// Groups drawn from cells of a ground-truth discrete latent.
    OracleBalanced {
        #[serde(default = "one")]
        beta: f64,
        /// Defaults to `m − 1`.
        #[serde(default)]
        a: Option<usize>,
        #[serde(default)]
        column: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Checkpoint with the best train-domain validation accuracy.
    BestValidation,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Anchors per environment per step; each balanced group adds `a`
    /// matches, and the random sampler draws `batch · (a + 1)` examples per
    /// environment so all samplers see equally large batches.
    pub batch: usize,
    pub sampler: Sampler,
    pub seed: u64,
    pub val_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub eval_every: usize,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 2000,
            batch: 64,
            sampler: Sampler::Random,
            seed: 0,
            val_fraction: 0.1,
            hidden: vec![64],
            activation: Activation::Relu,
            eval_every: 100,
            selection: Selection::BestValidation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(TrainError::Config(s));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 {
            return bad("steps, batch and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} not in [0, 1)", self.val_fraction));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        match &self.sampler {
            Sampler::Balanced { beta, .. } | Sampler::OracleBalanced { beta, .. }
                if !(0.0..=1.0).contains(beta) =>
            {
                bad(format!("beta {beta} not in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub net: Mlp,
}

impl Classifier {
    pub fn new(dim: usize, m: usize, hidden: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(m);
        Ok(Self { net: Mlp::new(&sizes, activation, rng)? })
    }

    pub fn m(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.net.predict(x)?)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub cross_entropy: f64,
    pub count: usize,
}

pub fn evaluate_xy(clf: &Classifier, x: &Matrix, y: &[usize]) -> Result<Evaluation> {
    if y.is_empty() {
        return Err(TrainError::Empty);
    }
    let logits = clf.logits(x)?;
    let (mut correct, mut ce) = (0usize, 0.0);
    for (i, &label) in y.iter().enumerate() {
        let row = logits.row(i);
        if argmax(row) == label {
            correct += 1;
        }
        ce -= log_softmax(row)?[label];
    }
    Ok(Evaluation {
        accuracy: correct as f64 / y.len() as f64,
        cross_entropy: ce / y.len() as f64,
        count: y.len(),
    })
}

pub fn evaluate(clf: &Classifier, data: &EnvData) -> Result<Evaluation> {
    evaluate_xy(clf, &data.x, &data.y)
}

/// Pooled evaluation over every environment.
pub fn evaluate_dataset(clf: &Classifier, data: &Dataset) -> Result<Evaluation> {
    let (mut acc, mut ce, mut n) = (0.0, 0.0, 0usize);
    for e in data.envs.iter().filter(|e| !e.is_empty()) {
        let r = evaluate(clf, e)?;
        acc += r.accuracy * r.count as f64;
        ce += r.cross_entropy * r.count as f64;
        n += r.count;
    }
    if n == 0 {
        return Err(TrainError::Empty);
    }
    Ok(Evaluation { accuracy: acc / n as f64, cross_entropy: ce / n as f64, count: n })
}

/// Accuracy on freshly generated colored slices, one per flip probability.
pub fn env_sweep(
    clf: &Classifier,
    spec: &ColoredSpec,
    flips: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Evaluation>> {
    flips
        .iter()
        .enumerate()
        .map(|(i, &flip)| {
            let data = gen_colored_at(spec, flip, SWEEP_ENV_BASE + i, n, seed)?;
            evaluate(clf, &data)
        })
        .collect()
}

/// Environment ids used for generated evaluation slices, far from training ids.
pub const SWEEP_ENV_BASE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub split: String,
    pub env: Option<usize>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Step of the returned checkpoint.
    pub selected_step: usize,
    pub selected_val_accuracy: Option<f64>,
}

impl TrainLog {
    /// `step,loss,split,env,accuracy`; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("step,loss,split,env,accuracy\n");
        for r in &self.rows {
            let env = r.env.map(|e| e.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", r.step, opt(r.loss), r.split, env, opt(r.accuracy));
        }
        s
    }
}

/// Trains on `train`; `val` (train-domain held-out data) drives checkpoint
/// selection and the validation rows of the log.
pub fn train_classifier(
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    matches: Option<&MatchIndex>,
) -> Result<(Classifier, TrainLog)> {
    config.validate()?;
    let mut source = BatchSource::new(train, config, matches)?;
    let mut clf = Classifier::new(
        train.dim,
        train.m,
        &config.hidden,
        config.activation,
        &mut Rng::with_stream(config.seed, streams::CLASSIFIER_INIT),
    )?;
    let mut rng = Rng::with_stream(config.seed, streams::CLASSIFIER_TRAIN);
    let mut adam = AdamState::new(&clf.net.block_sizes(), AdamConfig::with_lr(config.lr));
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Classifier)> = None;
    let val = val.filter(|v| v.n_examples() > 0);

    for step in 1..=config.steps {
        let (x, y) = source.sample(train, &mut rng)?;
        let trace = clf.net.forward(&x)?;
        let logits = trace.output();
        let b = y.len() as f64;
        let mut up = Matrix::zeros(y.len(), train.m);
        let mut loss = 0.0;
        for (i, &label) in y.iter().enumerate() {
            let lp = log_softmax(logits.row(i))?;
            loss -= lp[label];
            for (c, l) in lp.iter().enumerate() {
                up.set(i, c, (l.exp() - if c == label { 1.0 } else { 0.0 }) / b);
            }
        }
        loss /= b;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite(step));
        }
        let grads = clf.net.backward(&trace, &up)?;
        adam.step(&mut clf.net.param_blocks_mut(), &grads.blocks())?;

        if step % config.eval_every == 0 || step == config.steps {
            log.rows.push(LogRow { step, loss: Some(loss), split: "train".into(), env: None, accuracy: None });
            if let Some(v) = val {
                for e in v.envs.iter().filter(|e| !e.is_empty()) {
                    let r = evaluate(&clf, e)?;
                    log.rows.push(LogRow {
                        step,
                        loss: Some(r.cross_entropy),
                        split: "val".into(),
                        env: Some(e.env),
                        accuracy: Some(r.accuracy),
                    });
                }
                let acc = evaluate_dataset(&clf, v)?.accuracy;
                if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
                    best = Some((acc, step, clf.clone()));
                }
            }
        }
    }
    match (config.selection, best) {
        (Selection::BestValidation, Some((acc, step, snapshot))) => {
            log.selected_step = step;
            log.selected_val_accuracy = Some(acc);
            Ok((snapshot, log))
        }
        _ => {
            log.selected_step = config.steps;
            log.selected_val_accuracy = match val {
                Some(v) => Some(evaluate_dataset(&clf, v)?.accuracy),
                None => None,
            };
            Ok((clf, log))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let mut net = Mlp::zeros(&[3, 2], Activation::Relu).unwrap();
        net.biases_mut()[0] = vec![0.0, 0.0];
        let clf = Classifier { net };
        let mut rng = Rng::new(1);
        let n = 2000;
        let x = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        let r = evaluate_xy(&clf, &x, &y).unwrap();
        assert!((r.cross_entropy - 2f64.ln()).abs() < 1e-12);
        // Ties resolve to class 0, so accuracy is the class-0 frequency.
        let zeros = y.iter().filter(|&&v| v == 0).count() as f64 / n as f64;
        assert_eq!(r.accuracy, zeros);
        assert!((r.accuracy - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{}", r.accuracy);
    }

    #[test]
    fn empty_slice_is_an_error() {
        let clf = Classifier::new(2, 2, &[3], Activation::Relu, &mut Rng::new(0)).unwrap();
        assert!(matches!(evaluate_xy(&clf, &Matrix::zeros(0, 2), &[]), Err(TrainError::Empty)));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let bad_beta = TrainConfig {
            sampler: Sampler::OracleBalanced { beta: 1.5, a: None, column: 0 },
            ..ok.clone()
        };
        assert!(bad_beta.validate().is_err());
        assert!(TrainConfig { steps: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { val_fraction: 1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn sampler_json_shapes() {
        let s: Sampler = serde_json::from_str(r#"{"kind":"oracle_balanced","beta":0.5}"#).unwrap();
        assert_eq!(s, Sampler::OracleBalanced { beta: 0.5, a: None, column: 0 });
        let s: Sampler = serde_json::from_str(r#"{"kind":"balanced","a":1}"#).unwrap();
        assert_eq!(s, Sampler::Balanced { a: 1, beta: 1.0 });
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            rows: vec![
                LogRow { step: 10, loss: Some(0.5), split: "train".into(), env: None, accuracy: None },
                LogRow { step: 10, loss: Some(0.25), split: "val".into(), env: Some(1), accuracy: Some(0.75) },
            ],
            ..Default::default()
        };
        assert_eq!(log.to_csv(), "step,loss,split,env,accuracy\n10,0.5,train,,\n10,0.25,val,1,0.75\n");
    }
}
