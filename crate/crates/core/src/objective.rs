//! Fairness-penalized logistic objective.
//!
//! `J(w, b) = mean softplus(-y (w.x + b)) + lambda * f(w) + gamma * |w|^2`
//!
//! where `f` is the cross-group penalty built from
//! `u = 1/(n0 n1) * sum_{i in group 0, j in group 1} 1[y_i = y_j] (x_i - x_j)`,
//! either `u.w` (signed) or `(u.w)^2` (squared). The intercept enters
//! neither the penalty nor the l2 term.

use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, Example};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ModelWeights {
    pub fn zeros(d: usize) -> Self {
        ModelWeights { w: vec![0.0; d], b: 0.0 }
    }

    pub fn new(w: Vec<f64>, b: f64) -> Self {
        ModelWeights { w, b }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.w.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        (self.w.iter().map(|v| v * v).sum::<f64>() + self.b * self.b).sqrt()
    }

    /// `self - step * grad`.
    pub fn descend(&self, grad: &Gradient, step: f64) -> ModelWeights {
        ModelWeights {
            w: self.w.iter().zip(&grad.w).map(|(w, g)| w - step * g).collect(),
            b: self.b - step * grad.b,
        }
    }

    /// Flat layout `[w_0, .., w_{d-1}, b]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.push(self.b);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        match flat.split_last() {
            Some((b, w)) if !w.is_empty() => Ok(ModelWeights { w: w.to_vec(), b: *b }),
            _ => Err(Error::DimensionMismatch {
                expected: 2,
                found: flat.len(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyForm {
    #[default]
    SquaredAverage,
    SignedAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub gamma: f64,
    #[serde(default)]
    pub form: PenaltyForm,
}

impl PenaltyConfig {
    pub fn none() -> Self {
        PenaltyConfig::default()
    }

    pub fn new(lambda: f64, gamma: f64, form: PenaltyForm) -> Self {
        PenaltyConfig { lambda, gamma, form }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) || !self.lambda.is_finite() || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "penalty weights must be finite and non-negative (lambda={}, gamma={})",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w: Vec<f64>,
    pub b: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn nonempty(batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Empty("objective evaluated on an empty batch".into()))
    } else {
        Ok(())
    }
}

/// Mean logistic loss `ln(1 + exp(-y (w.x + b)))`.
pub fn logistic_loss(weights: &ModelWeights, batch: &[Example]) -> Result<f64> {
    nonempty(batch)?;
    let total: f64 = batch
        .iter()
        .map(|r| softplus(-f64::from(r.outcome) * weights.margin(&r.features)))
        .sum();
    Ok(total / batch.len() as f64)
}

/// The cross-group difference vector `u`, or `None` when a group is absent
/// from the batch. Runs in O(n d) from per-(group, label) feature sums:
/// `sum_{i,j same label y} (x_i - x_j) = n1_y * S0_y - n0_y * S1_y`.
pub fn penalty_direction(batch: &[Example]) -> Option<Vec<f64>> {
    let d = batch.first()?.features.len();
    // [group][label] with label 0 = negative, 1 = positive
    let mut sums = [[vec![0.0; d], vec![0.0; d]], [vec![0.0; d], vec![0.0; d]]];
    let mut counts = [[0usize; 2]; 2];
    for r in batch {
        let (g, y) = (r.group as usize, usize::from(r.outcome > 0));
        counts[g][y] += 1;
        for (s, x) in sums[g][y].iter_mut().zip(&r.features) {
            *s += x;
        }
    }
    let n0 = counts[0][0] + counts[0][1];
    let n1 = counts[1][0] + counts[1][1];
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let scale = 1.0 / (n0 as f64 * n1 as f64);
    let mut u = vec![0.0; d];
    for y in 0..2 {
        let (c0, c1) = (counts[0][y] as f64, counts[1][y] as f64);
        for (j, uj) in u.iter_mut().enumerate() {
            *uj += c1 * sums[0][y][j] - c0 * sums[1][y][j];
        }
    }
    for uj in &mut u {
        *uj *= scale;
    }
    Some(u)
}

/// Group fairness penalty; zero when the batch lacks either group.
pub fn fairness_penalty(weights: &ModelWeights, batch: &[Example], form: PenaltyForm) -> f64 {
    match penalty_direction(batch) {
        None => 0.0,
        Some(u) => {
            let s = dot(&u, &weights.w);
            match form {
                PenaltyForm::SignedAverage => s,
                PenaltyForm::SquaredAverage => s * s,
            }
        }
    }
}

/// Objective value and its exact gradient.
pub fn objective_and_gradient(
    weights: &ModelWeights,
    batch: &[Example],
    cfg: &PenaltyConfig,
) -> Result<(f64, Gradient)> {
    nonempty(batch)?;
    let d = weights.dim();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    for r in batch {
        if r.features.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: r.features.len(),
            });
        }
        let y = f64::from(r.outcome);
        let z = -y * weights.margin(&r.features);
        loss += softplus(z);
        let coef = -y * sigmoid(z);
        for (g, x) in gw.iter_mut().zip(&r.features) {
            *g += coef * x;
        }
        gb += coef;
    }
    let mut value = loss / n;
    for g in &mut gw {
        *g /= n;
    }
    gb /= n;

    if cfg.lambda != 0.0 {
        if let Some(u) = penalty_direction(batch) {
            let s = dot(&u, &weights.w);
            let (pen, factor) = match cfg.form {
                PenaltyForm::SignedAverage => (s, cfg.lambda),
                PenaltyForm::SquaredAverage => (s * s, 2.0 * cfg.lambda * s),
            };
            value += cfg.lambda * pen;
            for (g, uj) in gw.iter_mut().zip(&u) {
                *g += factor * uj;
            }
        }
    }
    if cfg.gamma != 0.0 {
        value += cfg.gamma * dot(&weights.w, &weights.w);
        for (g, w) in gw.iter_mut().zip(&weights.w) {
            *g += 2.0 * cfg.gamma * w;
        }
    }
    Ok((value, Gradient { w: gw, b: gb }))
}

pub fn objective(weights: &ModelWeights, batch: &[Example], cfg: &PenaltyConfig) -> Result<f64> {
    objective_and_gradient(weights, batch, cfg).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(x: &[f64], y: i8, g: u8) -> Example {
        Example::new(x.to_vec(), y, g)
    }

    fn fixture() -> Vec<Example> {
        vec![
            row(&[1.0, 0.0], 1, 0),
            row(&[0.0, 1.0], -1, 0),
            row(&[0.0, 0.0], 1, 1),
        ]
    }

    #[test]
    fn zero_weights_give_ln2() {
        let batch = fixture();
        let l = logistic_loss(&ModelWeights::zeros(2), &batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn single_row_loss() {
        let l = logistic_loss(&ModelWeights::new(vec![2.0], 0.0), &[row(&[1.0], 1, 0)]).unwrap();
        // ln(1 + e^-2)
        assert!((l - 0.126_928_011_042_972_1).abs() < 1e-15, "{l}");
    }

    #[test]
    fn large_negative_margin_does_not_overflow() {
        let l = logistic_loss(&ModelWeights::new(vec![50.0], 0.0), &[row(&[1.0], -1, 0)]).unwrap();
        // 50 + ln(1 + e^-50)
        assert!((l - 50.0).abs() < 1e-12);
        let l = logistic_loss(&ModelWeights::new(vec![1000.0], 0.0), &[row(&[1.0], -1, 0)]).unwrap();
        assert_eq!(l, 1000.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(logistic_loss(&ModelWeights::zeros(1), &[]).is_err());
        assert!(objective_and_gradient(&ModelWeights::zeros(1), &[], &PenaltyConfig::none()).is_err());
    }

    #[test]
    fn penalty_worked_example() {
        let w = ModelWeights::new(vec![1.0, 2.0], 0.0);
        let batch = fixture();
        assert_eq!(fairness_penalty(&w, &batch, PenaltyForm::SignedAverage), 0.5);
        assert_eq!(fairness_penalty(&w, &batch, PenaltyForm::SquaredAverage), 0.25);
    }

    #[test]
    fn penalty_degenerate_cases() {
        let w = ModelWeights::new(vec![1.0, 2.0], 0.0);
        let one_group = vec![row(&[1.0, 0.0], 1, 0), row(&[0.0, 1.0], -1, 0)];
        assert_eq!(fairness_penalty(&w, &one_group, PenaltyForm::SignedAverage), 0.0);
        assert_eq!(fairness_penalty(&w, &one_group, PenaltyForm::SquaredAverage), 0.0);
        let zero = ModelWeights::zeros(2);
        for form in [PenaltyForm::SignedAverage, PenaltyForm::SquaredAverage] {
            assert_eq!(fairness_penalty(&zero, &fixture(), form), 0.0);
        }
    }

    #[test]
    fn unpenalized_objective_reduces_to_loss() {
        let w = ModelWeights::new(vec![0.3, -0.7], 0.2);
        let batch = fixture();
        let (v, _) = objective_and_gradient(&w, &batch, &PenaltyConfig::none()).unwrap();
        assert_eq!(v, logistic_loss(&w, &batch).unwrap());
    }

    #[test]
    fn ridge_term_value() {
        // all-zero features give margin 0
        let batch = vec![row(&[0.0, 0.0], 1, 0), row(&[0.0, 0.0], -1, 1)];
        let w = ModelWeights::new(vec![3.0, 4.0], 0.0);
        let cfg = PenaltyConfig::new(0.0, 1.0, PenaltyForm::SquaredAverage);
        let (v, g) = objective_and_gradient(&w, &batch, &cfg).unwrap();
        assert!((v - (std::f64::consts::LN_2 + 25.0)).abs() < 1e-12);
        assert_eq!(g.w, vec![6.0, 8.0]);
        assert_eq!(g.b, 0.0);
    }

    #[test]
    fn flat_round_trip() {
        let w = ModelWeights::new(vec![1.0, -2.0], 0.5);
        assert_eq!(ModelWeights::from_flat(&w.to_flat()).unwrap(), w);
        assert!(ModelWeights::from_flat(&[1.0]).is_err());
    }
}
