//! Local mini-batch SGD on the penalized objective and the per-client
//! lambda sweep.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::predict;
use crate::objective::{objective_and_gradient, ModelWeights, PenaltyConfig};
use crate::seed;

/// Weight norm beyond which training is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 128,
            learning_rate: 0.1,
            penalty: PenaltyConfig::none(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidConfig("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        self.penalty.validate()
    }
}

/// How one batch moves the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `w <- w - lr * grad F(w)`.
    Sgd,
    /// First-order meta step: adapt a copy with `inner_steps` steps of size
    /// `inner_lr`, then `w <- w - lr * grad F(w_adapted)`.
    FirstOrderMeta { inner_steps: usize, inner_lr: f64 },
}

/// Row order for one epoch. Depends only on `(seed, epoch, n)`.
pub fn epoch_permutation(seed_value: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(seed_value, &[seed::TAG_EPOCH, epoch as u64]));
    idx
}

fn check(weights: &ModelWeights, epoch: usize, batch: usize) -> Result<()> {
    if !weights.is_finite() || weights.norm() > DIVERGENCE_NORM {
        Err(Error::Diverged { epoch, batch })
    } else {
        Ok(())
    }
}

pub(crate) fn train_with_rule(
    init: &ModelWeights,
    data: &Dataset,
    cfg: &TrainConfig,
    rule: StepRule,
) -> Result<ModelWeights> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("local training on an empty dataset".into()));
    }
    if data.dim() != init.dim() {
        return Err(Error::DimensionMismatch {
            expected: init.dim(),
            found: data.dim(),
        });
    }
    let rows = data.rows();
    let mut w = init.clone();
    let mut batch: Vec<Example> = Vec::with_capacity(cfg.batch_size.min(rows.len()));
    for epoch in 0..cfg.epochs {
        let order = epoch_permutation(cfg.seed, epoch, rows.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i].clone()));
            w = match rule {
                StepRule::Sgd => {
                    let (_, g) = objective_and_gradient(&w, &batch, &cfg.penalty)?;
                    w.descend(&g, cfg.learning_rate)
                }
                StepRule::FirstOrderMeta { inner_steps, inner_lr } => {
                    let mut adapted = w.clone();
                    for _ in 0..inner_steps {
                        let (_, g) = objective_and_gradient(&adapted, &batch, &cfg.penalty)?;
                        adapted = adapted.descend(&g, inner_lr);
                    }
                    let (_, g) = objective_and_gradient(&adapted, &batch, &cfg.penalty)?;
                    w.descend(&g, cfg.learning_rate)
                }
            };
            check(&w, epoch, b)?;
        }
    }
    Ok(w)
}

/// Mini-batch SGD from `init`: each epoch shuffles with its own stream,
/// cuts batches of `batch_size` (the last may be short) and steps on each.
pub fn train_local(init: &ModelWeights, data: &Dataset, cfg: &TrainConfig) -> Result<ModelWeights> {
    train_with_rule(init, data, cfg, StepRule::Sgd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMetric {
    #[default]
    Accuracy,
    /// Mean squared error of the predicted probability against the 0/1 outcome.
    Mse,
}

impl SweepMetric {
    pub fn evaluate(self, weights: &ModelWeights, data: &Dataset) -> f64 {
        let preds = predict(weights, data, 0.5);
        let n = preds.len() as f64;
        match self {
            SweepMetric::Accuracy => {
                preds
                    .decisions
                    .iter()
                    .zip(&preds.outcomes)
                    .filter(|(d, y)| d == y)
                    .count() as f64
                    / n
            }
            SweepMetric::Mse => {
                preds
                    .scores
                    .iter()
                    .zip(&preds.outcomes)
                    .map(|(s, &y)| (s - f64::from(y)).powi(2))
                    .sum::<f64>()
                    / n
            }
        }
    }

    /// Whether `value` is still within the tolerated degradation of `baseline`.
    pub fn acceptable(self, value: f64, baseline: f64, factor: f64) -> bool {
        match self {
            SweepMetric::Accuracy => value >= factor * baseline,
            SweepMetric::Mse => value * factor <= baseline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweepConfig {
    pub step: f64,
    /// Accuracy must stay at or above `factor * Acc0`.
    pub factor: f64,
    pub max_lambda: f64,
    #[serde(default)]
    pub metric: SweepMetric,
}

impl Default for LambdaSweepConfig {
    fn default() -> Self {
        LambdaSweepConfig {
            step: 0.5,
            factor: 0.995,
            max_lambda: 10.0,
            metric: SweepMetric::Accuracy,
        }
    }
}

impl LambdaSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.factor > 0.0 && self.factor <= 1.0) || !(self.max_lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid lambda sweep settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub lambda_k: f64,
    pub baseline: f64,
    /// `(lambda, metric)` pairs including `lambda = 0`.
    pub trace: Vec<(f64, f64)>,
    /// The sweep hit `max_lambda` without degrading.
    pub reached_max: bool,
}

/// Largest `lambda` in `trace` (sorted ascending, excluding the baseline)
/// before the first unacceptable value. Returns the choice and whether every
/// entry was acceptable.
pub fn choose_lambda(baseline: f64, trace: &[(f64, f64)], factor: f64, metric: SweepMetric) -> (f64, bool) {
    let mut chosen = 0.0;
    for &(lambda, value) in trace {
        if !metric.acceptable(value, baseline, factor) {
            return (chosen, false);
        }
        chosen = lambda;
    }
    (chosen, true)
}

/// Retrains from `init` at `lambda = 0, step, 2 step, ...` until the test
/// metric degrades past the threshold or `max_lambda` is reached.
pub fn lambda_sweep(
    init: &ModelWeights,
    train: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    sweep: &LambdaSweepConfig,
) -> Result<LambdaSweep> {
    sweep.validate()?;
    let positives = test.rows().iter().filter(|r| r.outcome > 0).count();
    if positives == 0 || positives == test.len() {
        return Err(Error::DegenerateBaseline(
            "lambda sweep test split holds a single outcome class".into(),
        ));
    }
    let run = |lambda: f64| -> Result<f64> {
        let mut cfg = *base;
        cfg.penalty.lambda = lambda;
        let w = train_local(init, train, &cfg)?;
        Ok(sweep.metric.evaluate(&w, test))
    };
    let baseline = run(0.0)?;
    let mut trace = vec![(0.0, baseline)];
    let mut reached_max = true;
    let mut i = 1usize;
    loop {
        let lambda = i as f64 * sweep.step;
        if lambda > sweep.max_lambda * (1.0 + 1e-12) {
            break;
        }
        let value = run(lambda)?;
        trace.push((lambda, value));
        if !sweep.metric.acceptable(value, baseline, sweep.factor) {
            reached_max = false;
            break;
        }
        i += 1;
    }
    let (lambda_k, _) = choose_lambda(baseline, &trace[1..], sweep.factor, sweep.metric);
    if reached_max {
        log::warn!("lambda sweep never degraded up to max lambda {}; using it", sweep.max_lambda);
    }
    Ok(LambdaSweep {
        lambda_k,
        baseline,
        trace,
        reached_max,
    })
}

/// Writes `lambda,metric` rows for plotting.
pub fn write_sweep_csv(path: &Path, sweep: &LambdaSweep) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "metric"])?;
    for (l, v) in &sweep.trace {
        w.write_record([l.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
