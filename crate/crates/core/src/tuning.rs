//! Penalty-weight selection: per-client lambda sweeps aggregated into
//! candidates, and a coarse-then-refined grid search over gamma.
//!
//! The gamma selection rule: keep candidates whose mean client AUROC is
//! within `auc_budget` of the best in the table, then take the smallest
//! `(DPD + EOD) / 2`, breaking ties toward the smaller gamma.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientSplit, Dataset};
use crate::error::{Error, Result};
use crate::federation::{client_models, run_federation, FederationConfig};
use crate::metrics::{average_reports, evaluate, fmt_value, MetricsReport};
use crate::objective::{ModelWeights, PenaltyConfig};
use crate::trainer::{lambda_sweep, LambdaSweep, LambdaSweepConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaPolicy {
    #[default]
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineMode {
    /// The single coarse interval next to the selected gamma, on the side of
    /// the better-ranked neighbour.
    #[default]
    OneInterval,
    /// `[gamma_{s-1}, gamma_{s+1}]`, clamped at the grid ends.
    TwoInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub coarse_points: usize,
    pub refined_points: usize,
    pub gamma_range: [f64; 2],
    pub lambda_count: usize,
    #[serde(default)]
    pub lambda_policy: LambdaPolicy,
    pub auc_budget: f64,
    #[serde(default)]
    pub refine: RefineMode,
    #[serde(default)]
    pub sweep: LambdaSweepConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            coarse_points: 10,
            refined_points: 10,
            gamma_range: [0.0001, 0.1],
            lambda_count: 1,
            lambda_policy: LambdaPolicy::Min,
            auc_budget: 0.02,
            refine: RefineMode::OneInterval,
            sweep: LambdaSweepConfig::default(),
            threshold: 0.5,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_points < 2 || self.refined_points < 2 {
            return Err(Error::InvalidConfig("gamma grids need at least 2 points".into()));
        }
        if !(self.gamma_range[0] < self.gamma_range[1]) || self.gamma_range[0] < 0.0 {
            return Err(Error::InvalidConfig(format!("bad gamma range {:?}", self.gamma_range)));
        }
        if self.lambda_count < 1 || !(self.auc_budget >= 0.0) {
            return Err(Error::InvalidConfig("lambda count >= 1 and AUC budget >= 0 required".into()));
        }
        self.sweep.validate()
    }
}

/// `count` equally spaced values from `lo` to `hi` inclusive.
pub fn gamma_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo < hi) || count < 2 || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig(format!("invalid gamma grid ({lo}, {hi}, {count})")));
    }
    let step = (hi - lo) / (count - 1) as f64;
    let mut g: Vec<f64> = (0..count).map(|i| lo + i as f64 * step).collect();
    g[count - 1] = hi;
    Ok(g)
}

/// `count` equally spaced values in `(0, lambda*]`, with `lambda*` the min or
/// max of the per-client choices.
pub fn lambda_candidates(lambda_k: &[f64], policy: LambdaPolicy, count: usize) -> Result<Vec<f64>> {
    if lambda_k.is_empty() || count < 1 {
        return Err(Error::InvalidConfig("need per-client lambdas and count >= 1".into()));
    }
    let star = match policy {
        LambdaPolicy::Min => lambda_k.iter().copied().fold(f64::INFINITY, f64::min),
        LambdaPolicy::Max => lambda_k.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    if !(star > 0.0) {
        log::warn!("aggregated lambda is 0; the fairness penalty is disabled");
        return Ok(vec![0.0]);
    }
    Ok((1..=count).map(|i| star * (i as f64 / count as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub per_client: Vec<LambdaSweep>,
    pub candidates: Vec<f64>,
}

/// Sweeps lambda on every client's own split, then aggregates.
pub fn select_lambda(
    clients: &[ClientSplit],
    base: &TrainConfig,
    sweep: &LambdaSweepConfig,
    policy: LambdaPolicy,
    count: usize,
) -> Result<LambdaSelection> {
    let per_client = clients
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            lambda_sweep(&ModelWeights::zeros(c.train.dim()), &c.train, &c.test, base, sweep)
                .map_err(|e| e.in_client(k))
        })
        .collect::<Result<Vec<_>>>()?;
    let ks: Vec<f64> = per_client.iter().map(|s| s.lambda_k).collect();
    let candidates = lambda_candidates(&ks, policy, count)?;
    Ok(LambdaSelection { per_client, candidates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub mean_auc: Option<f64>,
    pub dpd: Option<f64>,
    pub dpr: Option<f64>,
    pub eod: Option<f64>,
    pub eor: Option<f64>,
    pub eligible: bool,
    pub selected: bool,
}

impl GammaRow {
    fn from_means(gamma: f64, means: [Option<f64>; 5]) -> Self {
        GammaRow {
            gamma,
            mean_auc: means[0],
            dpd: means[1],
            dpr: means[2],
            eod: means[3],
            eor: means[4],
            eligible: false,
            selected: false,
        }
    }

    /// `(DPD + EOD) / 2`; unrankable when either is undefined.
    pub fn fairness_score(&self) -> Option<f64> {
        Some((self.dpd? + self.eod?) / 2.0)
    }
}

/// Rule ordering: eligible first, then lower fairness score, then lower gamma.
fn rule_order(a: &GammaRow, b: &GammaRow) -> Ordering {
    let score = |r: &GammaRow| r.fairness_score().unwrap_or(f64::INFINITY);
    b.eligible
        .cmp(&a.eligible)
        .then(score(a).total_cmp(&score(b)))
        .then(a.gamma.total_cmp(&b.gamma))
}

/// Marks eligibility and the winner in `table`; returns the winner's index.
/// A pure function of the table's metric columns.
pub fn select_gamma(table: &mut [GammaRow], auc_budget: f64) -> Option<usize> {
    if table.is_empty() {
        return None;
    }
    let best = table.iter().filter_map(|r| r.mean_auc).fold(f64::NEG_INFINITY, f64::max);
    for r in table.iter_mut() {
        r.eligible = match r.mean_auc {
            Some(a) => a >= best - auc_budget,
            // no AUROC anywhere: nothing to budget against
            None => best == f64::NEG_INFINITY,
        };
        r.selected = false;
    }
    let winner = (0..table.len()).min_by(|&i, &j| rule_order(&table[i], &table[j]))?;
    table[winner].selected = true;
    Some(winner)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSearch {
    pub lambda: f64,
    pub selected: f64,
    pub selected_index: usize,
    pub table: Vec<GammaRow>,
}

/// Evaluates each client's model on its own test split.
pub fn evaluate_clients(models: &[ModelWeights], tests: &[&Dataset], threshold: f64) -> Result<Vec<MetricsReport>> {
    models
        .iter()
        .zip(tests)
        .enumerate()
        .map(|(k, (m, t))| evaluate(m, t, threshold).map_err(|e| e.in_client(k)))
        .collect()
}

/// Trains a federation with the given penalty and returns per-client reports.
pub fn train_and_evaluate(
    clients: &[ClientSplit],
    fed_cfg: &FederationConfig,
    penalty: PenaltyConfig,
    threshold: f64,
) -> Result<(ModelWeights, Vec<MetricsReport>)> {
    let cfg = fed_cfg.with_penalty(penalty);
    let trains: Vec<Dataset> = clients.iter().map(|c| c.train.clone()).collect();
    let run = run_federation(&trains, &cfg)?;
    let models = client_models(&run.final_model, &trains, &cfg)?;
    let tests: Vec<&Dataset> = clients.iter().map(|c| &c.test).collect();
    let reports = evaluate_clients(&models, &tests, threshold)?;
    Ok((run.final_model.weights, reports))
}

/// One full federated training per grid value, then the selection rule.
pub fn optimize_gamma(
    grid: &[f64],
    lambda: f64,
    clients: &[ClientSplit],
    fed_cfg: &FederationConfig,
    auc_budget: f64,
    threshold: f64,
) -> Result<GammaSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty gamma grid".into()));
    }
    let form = fed_cfg.train.penalty.form;
    let rows: Vec<GammaRow> = grid
        .par_iter()
        .map(|&gamma| {
            let penalty = PenaltyConfig::new(lambda, gamma, form);
            let (_, reports) = train_and_evaluate(clients, fed_cfg, penalty, threshold).map_err(|e| Error::Gamma {
                gamma,
                source: Box::new(e),
            })?;
            Ok(GammaRow::from_means(gamma, average_reports(&reports).0))
        })
        .collect::<Result<_>>()?;
    let mut table = rows;
    let selected_index = select_gamma(&mut table, auc_budget).expect("non-empty table");
    Ok(GammaSearch {
        lambda,
        selected: table[selected_index].gamma,
        selected_index,
        table,
    })
}

/// Range searched in the second step around the coarse winner.
pub fn refine_range(search: &GammaSearch, mode: RefineMode) -> [f64; 2] {
    let t = &search.table;
    let s = search.selected_index;
    let last = t.len() - 1;
    match mode {
        RefineMode::TwoInterval => [t[s.saturating_sub(1)].gamma, t[(s + 1).min(last)].gamma],
        RefineMode::OneInterval => {
            if s == 0 {
                [t[0].gamma, t[1].gamma]
            } else if s == last {
                [t[last - 1].gamma, t[last].gamma]
            } else if rule_order(&t[s + 1], &t[s - 1]) == Ordering::Less {
                [t[s].gamma, t[s + 1].gamma]
            } else {
                [t[s - 1].gamma, t[s].gamma]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepGamma {
    pub gamma_final: f64,
    pub refine: RefineMode,
    pub refined_range: [f64; 2],
    pub coarse: GammaSearch,
    pub refined: GammaSearch,
}

/// Coarse search over `gamma_range`, then a refined search around its winner.
pub fn two_step_gamma(
    lambda: f64,
    clients: &[ClientSplit],
    fed_cfg: &FederationConfig,
    tune: &TuningConfig,
) -> Result<TwoStepGamma> {
    tune.validate()?;
    let coarse_grid = gamma_grid(tune.gamma_range[0], tune.gamma_range[1], tune.coarse_points)?;
    let coarse = optimize_gamma(&coarse_grid, lambda, clients, fed_cfg, tune.auc_budget, tune.threshold)?;
    let refined_range = refine_range(&coarse, tune.refine);
    let fine_grid = gamma_grid(refined_range[0], refined_range[1], tune.refined_points)?;
    let refined = optimize_gamma(&fine_grid, lambda, clients, fed_cfg, tune.auc_budget, tune.threshold)?;
    Ok(TwoStepGamma {
        gamma_final: refined.selected,
        refine: tune.refine,
        refined_range,
        coarse,
        refined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedPenalty {
    pub lambda: f64,
    pub gamma: f64,
    /// Winning row of each lambda candidate, flagged by the rule.
    pub finals: Vec<GammaRow>,
    /// Two-step gamma search per lambda candidate; empty when gamma is pinned.
    pub searches: Vec<TwoStepGamma>,
}

/// Resolves `(lambda, gamma)` for one framework: a two-step gamma search per
/// lambda candidate (or a single evaluation at a pinned gamma), then the
/// selection rule across the candidates' winners.
pub fn tune_penalty(
    lambdas: &[f64],
    pinned_gamma: Option<f64>,
    clients: &[ClientSplit],
    fed_cfg: &FederationConfig,
    tune: &TuningConfig,
) -> Result<TunedPenalty> {
    tune.validate()?;
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("no lambda candidates".into()));
    }
    let mut searches = Vec::new();
    let mut finals = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        match pinned_gamma {
            Some(gamma) => {
                let s = optimize_gamma(&[gamma], lambda, clients, fed_cfg, tune.auc_budget, tune.threshold)?;
                finals.push(s.table[0].clone());
            }
            None => {
                let s = two_step_gamma(lambda, clients, fed_cfg, tune)?;
                finals.push(s.refined.table[s.refined.selected_index].clone());
                searches.push(s);
            }
        }
    }
    let best = select_gamma(&mut finals, tune.auc_budget).expect("at least one candidate");
    Ok(TunedPenalty {
        lambda: lambdas[best],
        gamma: finals[best].gamma,
        finals,
        searches,
    })
}

/// Audit table with columns
/// `gamma, mean_auc, DPD, DPR, EOD, EOR, eligible, selected`.
pub fn write_gamma_csv(path: &Path, search: &GammaSearch) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gamma", "mean_auc", "DPD", "DPR", "EOD", "EOR", "eligible", "selected"])?;
    for r in &search.table {
        w.write_record([
            r.gamma.to_string(),
            fmt_value(r.mean_auc),
            fmt_value(r.dpd),
            fmt_value(r.dpr),
            fmt_value(r.eod),
            fmt_value(r.eor),
            r.eligible.to_string(),
            r.selected.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, sig: i32) -> bool {
        let scale = 10f64.powi(b.abs().log10().floor() as i32 - sig + 1);
        (a / scale).round() == (b / scale).round()
    }

    #[test]
    fn coarse_grid_points() {
        let g = gamma_grid(0.0001, 0.1, 10).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.0001);
        assert_eq!(g[9], 0.1);
        assert!(close(g[1], 0.0112, 3), "{}", g[1]);
        assert!(close(g[2], 0.0223, 3), "{}", g[2]);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn refined_grid_point() {
        let g = gamma_grid(0.0112, 0.0223, 10).unwrap();
        assert!(close(g[7], 0.019833, 5), "{}", g[7]);
    }

    #[test]
    fn two_point_grid() {
        assert_eq!(gamma_grid(0.0, 1.0, 2).unwrap(), vec![0.0, 1.0]);
        assert!(gamma_grid(1.0, 1.0, 3).is_err());
        assert!(gamma_grid(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn lambda_candidate_policies() {
        let ks = [5.0, 10.0, 15.0];
        assert_eq!(lambda_candidates(&ks, LambdaPolicy::Min, 1).unwrap(), vec![5.0]);
        assert_eq!(lambda_candidates(&ks, LambdaPolicy::Max, 3).unwrap(), vec![5.0, 10.0, 15.0]);
        for p in [LambdaPolicy::Min, LambdaPolicy::Max] {
            assert_eq!(lambda_candidates(&[7.0], p, 1).unwrap(), vec![7.0]);
        }
        assert_eq!(lambda_candidates(&[0.0, 0.0], LambdaPolicy::Max, 4).unwrap(), vec![0.0]);
        assert!(lambda_candidates(&[], LambdaPolicy::Min, 1).is_err());
    }

    fn row(gamma: f64, auc: f64, dpd: f64, eod: f64) -> GammaRow {
        GammaRow {
            gamma,
            mean_auc: Some(auc),
            dpd: Some(dpd),
            dpr: Some(0.5),
            eod: Some(eod),
            eor: Some(0.5),
            eligible: false,
            selected: false,
        }
    }

    #[test]
    fn rule_singleton_and_dominance() {
        let mut one = vec![row(0.3, 0.5, 0.9, 0.9)];
        assert_eq!(select_gamma(&mut one, 0.02), Some(0));
        let mut two = vec![row(0.1, 0.8, 0.2, 0.2), row(0.2, 0.8, 0.1, 0.1)];
        assert_eq!(select_gamma(&mut two, 0.02), Some(1));
        assert!(two[1].selected && !two[0].selected);
    }

    #[test]
    fn rule_respects_auc_budget_and_ties() {
        let mut t = vec![row(0.1, 0.80, 0.2, 0.2), row(0.2, 0.75, 0.0, 0.0), row(0.3, 0.79, 0.1, 0.1)];
        assert_eq!(select_gamma(&mut t, 0.02), Some(2));
        assert!(!t[1].eligible);
        let mut tie = vec![row(0.2, 0.8, 0.1, 0.1), row(0.1, 0.8, 0.1, 0.1)];
        assert_eq!(select_gamma(&mut tie, 0.02), Some(1));
    }

    fn search_with(winner: usize, rows: Vec<GammaRow>) -> GammaSearch {
        GammaSearch {
            lambda: 1.0,
            selected: rows[winner].gamma,
            selected_index: winner,
            table: rows,
        }
    }

    #[test]
    fn refine_ranges() {
        let grid = gamma_grid(0.0001, 0.1, 10).unwrap();
        let mk = |scores: &dyn Fn(usize) -> f64| {
            grid.iter()
                .enumerate()
                .map(|(i, &g)| row(g, 0.8, scores(i), scores(i)))
                .collect::<Vec<_>>()
        };
        // interior winner at 4, right neighbour better
        let s = search_with(4, mk(&|i| (i as f64 - 4.4).abs()));
        assert_eq!(refine_range(&s, RefineMode::TwoInterval), [grid[3], grid[5]]);
        assert_eq!(refine_range(&s, RefineMode::OneInterval), [grid[4], grid[5]]);
        let s = search_with(4, mk(&|i| (i as f64 - 3.6).abs()));
        assert_eq!(refine_range(&s, RefineMode::OneInterval), [grid[3], grid[4]]);
        // boundaries clamp
        let s = search_with(0, mk(&|i| i as f64));
        assert_eq!(refine_range(&s, RefineMode::TwoInterval), [grid[0], grid[1]]);
        assert_eq!(refine_range(&s, RefineMode::OneInterval), [grid[0], grid[1]]);
        let s = search_with(9, mk(&|i| 9.0 - i as f64));
        assert_eq!(refine_range(&s, RefineMode::TwoInterval), [grid[8], grid[9]]);
        // winner at 0.0112 with the right side favoured gives [0.0112, 0.0223]
        let s = search_with(1, mk(&|i| (i as f64 - 1.3).abs()));
        let r = refine_range(&s, RefineMode::OneInterval);
        assert_eq!(r, [grid[1], grid[2]]);
        let fine = gamma_grid(r[0], r[1], 10).unwrap();
        assert!(fine.iter().any(|&g| close(g, 0.019833, 5)));
    }
}
