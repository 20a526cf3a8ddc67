//! Prediction, AUROC and the four group-fairness metrics.
//!
//! For selection rates `r_a = E[Yhat | group = a]`:
//! `DPD = max_a r_a - min_a r_a`, `DPR = min_a r_a / max_a r_a`.
//! Equalized odds repeats this within each true-outcome slice; `EOD` takes
//! the largest slice difference and `EOR` the smallest slice ratio.
//! Lower DPD/EOD and higher DPR/EOR indicate greater fairness.
//!
//! Undefined quantities are `None`, never silently 0 or 1.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, Dataset};
use crate::error::{Error, Result};
use crate::objective::ModelWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scores: Vec<f64>,
    /// `1` iff `score >= threshold`.
    pub decisions: Vec<u8>,
    pub groups: Vec<u8>,
    /// True outcome in 0/1 form.
    pub outcomes: Vec<u8>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Builds a set from raw columns, deriving decisions with `threshold`.
    pub fn from_scores(scores: Vec<f64>, groups: Vec<u8>, outcomes: Vec<u8>, threshold: f64) -> Result<Self> {
        if scores.len() != groups.len() || scores.len() != outcomes.len() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                found: groups.len().min(outcomes.len()),
            });
        }
        let decisions = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        Ok(PredictionSet {
            scores,
            decisions,
            groups,
            outcomes,
        })
    }
}

/// `score = sigmoid(w.x + b)`, decision by `score >= threshold`.
pub fn predict(weights: &ModelWeights, data: &Dataset, threshold: f64) -> PredictionSet {
    let rows = data.rows();
    let scores: Vec<f64> = rows.iter().map(|r| sigmoid(weights.margin(&r.features))).collect();
    PredictionSet {
        decisions: scores.iter().map(|&s| u8::from(s >= threshold)).collect(),
        scores,
        groups: rows.iter().map(|r| r.group).collect(),
        outcomes: rows.iter().map(|r| u8::from(r.outcome > 0)).collect(),
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks in O(n log n).
pub fn auroc(preds: &PredictionSet) -> Result<f64> {
    auroc_from(&preds.scores, &preds.outcomes)
}

pub fn auroc_from(scores: &[f64], outcomes: &[u8]) -> Result<f64> {
    let n_pos = outcomes.iter().filter(|&&y| y == 1).count();
    let n_neg = outcomes.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the midrank
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if outcomes[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the evaluation set holds one outcome class.
    pub auroc: Option<f64>,
    pub dpd: f64,
    /// `None` when no group is ever selected.
    pub dpr: Option<f64>,
    /// `None` when every outcome slice was skipped.
    pub eod: Option<f64>,
    /// `None` when no slice ratio is defined.
    pub eor: Option<f64>,
    pub selection_rates: [f64; 2],
    /// Indexed `[outcome][group]`; `None` for an empty cell.
    pub conditional_rates: [[Option<f64>; 2]; 2],
    /// Indexed `[group][outcome]`.
    pub counts: [[usize; 2]; 2],
    /// Outcome values whose slice lacked one of the groups.
    pub skipped_eo_slices: Vec<u8>,
    /// Outcome values whose slice ratio was 0/0 and left out of EOR.
    pub undefined_eo_ratios: Vec<u8>,
}

fn ratio(lo: f64, hi: f64) -> Option<f64> {
    if hi > 0.0 {
        Some(lo / hi)
    } else {
        None
    }
}

/// Fairness metrics (and AUROC where defined) for one evaluation set.
pub fn fairness_metrics(preds: &PredictionSet) -> Result<MetricsReport> {
    let mut counts = [[0usize; 2]; 2];
    let mut selected = [[0usize; 2]; 2];
    for i in 0..preds.len() {
        let (g, y) = (preds.groups[i] as usize, preds.outcomes[i] as usize);
        counts[g][y] += 1;
        selected[g][y] += preds.decisions[i] as usize;
    }
    let mut selection_rates = [0.0; 2];
    for g in 0..2 {
        let n = counts[g][0] + counts[g][1];
        if n == 0 {
            return Err(Error::MissingGroup(g as u8));
        }
        selection_rates[g] = (selected[g][0] + selected[g][1]) as f64 / n as f64;
    }
    let (lo, hi) = min_max(selection_rates[0], selection_rates[1]);
    let dpd = hi - lo;
    let dpr = ratio(lo, hi);

    let mut conditional_rates = [[None; 2]; 2];
    let mut skipped_eo_slices = Vec::new();
    let mut undefined_eo_ratios = Vec::new();
    let mut eod: Option<f64> = None;
    let mut eor: Option<f64> = None;
    for y in 0..2 {
        for g in 0..2 {
            if counts[g][y] > 0 {
                conditional_rates[y][g] = Some(selected[g][y] as f64 / counts[g][y] as f64);
            }
        }
        match (conditional_rates[y][0], conditional_rates[y][1]) {
            (Some(a), Some(b)) => {
                let (lo, hi) = min_max(a, b);
                eod = Some(eod.map_or(hi - lo, |e| e.max(hi - lo)));
                match ratio(lo, hi) {
                    Some(r) => eor = Some(eor.map_or(r, |e| e.min(r))),
                    None => undefined_eo_ratios.push(y as u8),
                }
            }
            _ => skipped_eo_slices.push(y as u8),
        }
    }

    Ok(MetricsReport {
        auroc: auroc(preds).ok(),
        dpd,
        dpr,
        eod,
        eor,
        selection_rates,
        conditional_rates,
        counts,
        skipped_eo_slices,
        undefined_eo_ratios,
    })
}

fn min_max(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn evaluate(weights: &ModelWeights, data: &Dataset, threshold: f64) -> Result<MetricsReport> {
    fairness_metrics(&predict(weights, data, threshold))
}

/// The five reported metrics in table order: AUC, DPD, DPR, EOD, EOR.
pub const METRIC_NAMES: [&str; 5] = ["AUC", "DPD", "DPR", "EOD", "EOR"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FairnessDirection {
    LowerIsFairer,
    HigherIsFairer,
}

pub const FAIRNESS_DIRECTIONS: [FairnessDirection; 4] = [
    FairnessDirection::LowerIsFairer,
    FairnessDirection::HigherIsFairer,
    FairnessDirection::LowerIsFairer,
    FairnessDirection::HigherIsFairer,
];

impl MetricsReport {
    /// `[AUC, DPD, DPR, EOD, EOR]`.
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.auroc, Some(self.dpd), self.dpr, self.eod, self.eor]
    }

    pub fn fairness_values(&self) -> [Option<f64>; 4] {
        [Some(self.dpd), self.dpr, self.eod, self.eor]
    }
}

/// Unweighted mean over clients of each metric, skipping undefined cells.
/// Returns the means and, per metric, how many clients were excluded.
pub fn average_reports(reports: &[MetricsReport]) -> ([Option<f64>; 5], [usize; 5]) {
    let mut means = [None; 5];
    let mut excluded = [0; 5];
    for m in 0..5 {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.values()[m]).collect();
        excluded[m] = reports.len() - vals.len();
        if !vals.is_empty() {
            means[m] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    (means, excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    /// Percent change, or `None` when the baseline is 0 or either side undefined.
    pub percent: Option<f64>,
    pub direction: FairnessDirection,
    /// `Some(true)` when the change moved toward fairness.
    pub improved: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDelta {
    /// Absolute AUROC difference `report - baseline`.
    pub auroc_diff: Option<f64>,
    /// DPD, DPR, EOD, EOR in order.
    pub fairness: [MetricDelta; 4],
}

pub fn percent_change(value: Option<f64>, baseline: Option<f64>) -> Option<f64> {
    match (value, baseline) {
        (Some(v), Some(b)) if b != 0.0 => Some(100.0 * (v - b) / b),
        _ => None,
    }
}

/// Relative change of each fairness metric against a baseline row (values
/// as returned by [`MetricsReport::values`]).
pub fn baseline_delta_values(report: &[Option<f64>; 5], baseline: &[Option<f64>; 5]) -> BaselineDelta {
    let auroc_diff = match (report[0], baseline[0]) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let fairness = std::array::from_fn(|k| {
        let percent = percent_change(report[k + 1], baseline[k + 1]);
        let direction = FAIRNESS_DIRECTIONS[k];
        let improved = percent.map(|p| match direction {
            FairnessDirection::LowerIsFairer => p < 0.0,
            FairnessDirection::HigherIsFairer => p > 0.0,
        });
        MetricDelta {
            percent,
            direction,
            improved,
        }
    });
    BaselineDelta { auroc_diff, fairness }
}

pub fn baseline_delta(report: &MetricsReport, baseline: &MetricsReport) -> BaselineDelta {
    baseline_delta_values(&report.values(), &baseline.values())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub label: String,
    pub n: usize,
    pub prevalence: f64,
    /// `None` when the subgroup holds only one sensitive group.
    pub report: Option<MetricsReport>,
}

/// Fairness metrics within each value of an auxiliary attribute, ordered by
/// attribute value.
pub fn subgroup_report(
    weights: &ModelWeights,
    data: &Dataset,
    attribute: &str,
    threshold: f64,
) -> Result<Vec<SubgroupRow>> {
    let mut slices: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.rows().iter().enumerate() {
        let v = r.aux.get(attribute).ok_or_else(|| Error::BadAttribute {
            attribute: attribute.to_string(),
            row: i,
        })?;
        slices.entry(v.as_str()).or_default().push(i);
    }
    slices
        .into_iter()
        .map(|(label, idx)| {
            let sub = data.subset(&idx);
            let report = match evaluate(weights, &sub, threshold) {
                Ok(r) => Some(r),
                Err(Error::MissingGroup(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(SubgroupRow {
                label: label.to_string(),
                n: sub.len(),
                prevalence: sub.prevalence(),
                report,
            })
        })
        .collect()
}

pub(crate) fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "NA".to_string(),
    }
}

/// Writes subgroup rows with the columns
/// `<label>, N, Outcome Prevalence, DPD, DPR, EOD, EOR`.
pub fn write_subgroup_csv(path: &Path, label_header: &str, rows: &[SubgroupRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([label_header, "N", "Outcome Prevalence", "DPD", "DPR", "EOD", "EOR"])?;
    for r in rows {
        let f = r.report.as_ref().map(|m| m.fairness_values()).unwrap_or([None; 4]);
        let mut rec = vec![r.label.clone(), r.n.to_string(), r.prevalence.to_string()];
        rec.extend(f.iter().map(|v| fmt_value(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;

    fn preds(decisions: &[u8], groups: &[u8], outcomes: &[u8]) -> PredictionSet {
        PredictionSet {
            scores: decisions.iter().map(|&d| f64::from(d)).collect(),
            decisions: decisions.to_vec(),
            groups: groups.to_vec(),
            outcomes: outcomes.to_vec(),
        }
    }

    #[test]
    fn predict_tie_rule_and_threshold() {
        let ds = Dataset::from_rows(vec![Example::new(vec![1.0], 1, 0), Example::new(vec![-2.0], -1, 1)]).unwrap();
        let p = predict(&ModelWeights::zeros(1), &ds, 0.5);
        assert_eq!(p.scores, vec![0.5, 0.5]);
        assert_eq!(p.decisions, vec![1, 1]);
        assert_eq!(p.outcomes, vec![1, 0]);
        let p = predict(&ModelWeights::new(vec![10.0], 0.0), &ds, 0.5);
        assert!(p.scores[0] > 0.9999);
        let p = predict(&ModelWeights::zeros(1), &ds, 1.1);
        assert_eq!(p.decisions, vec![0, 0]);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc_from(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc_from(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc_from(&[0.9, 0.3, 0.4, 0.2], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(auroc_from(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn demographic_parity_example() {
        let p = preds(&[1, 1, 0, 0, 1, 0, 0, 0], &[0, 0, 0, 0, 1, 1, 1, 1], &[1, 0, 1, 0, 1, 0, 1, 0]);
        let r = fairness_metrics(&p).unwrap();
        assert_eq!(r.selection_rates, [0.5, 0.25]);
        assert_eq!(r.dpd, 0.25);
        assert_eq!(r.dpr, Some(0.5));
    }

    #[test]
    fn equalized_odds_example() {
        // y=1: A 2/2, B 1/2; y=0: A 1/5, B 1/10
        let mut d = vec![1, 1, 1, 0, 0, 0, 0];
        let mut g = vec![0; 7];
        let mut y = vec![1, 1, 0, 0, 0, 0, 0];
        d.extend([1, 0]);
        g.extend([1, 1]);
        y.extend([1, 1]);
        d.extend([1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        g.extend([1; 10]);
        y.extend([0; 10]);
        let r = fairness_metrics(&preds(&d, &g, &y)).unwrap();
        assert_eq!(r.conditional_rates[1], [Some(1.0), Some(0.5)]);
        assert_eq!(r.conditional_rates[0], [Some(0.2), Some(0.1)]);
        assert_eq!(r.eod, Some(0.5));
        assert_eq!(r.eor, Some(0.5));
    }

    #[test]
    fn perfect_parity() {
        let p = preds(&[1, 0, 1, 0], &[0, 0, 1, 1], &[1, 0, 1, 0]);
        let r = fairness_metrics(&p).unwrap();
        assert_eq!((r.dpd, r.dpr, r.eod, r.eor), (0.0, Some(1.0), Some(0.0), Some(1.0)));
    }

    #[test]
    fn undefined_cells_are_flagged() {
        // nobody selected: ratios undefined
        let p = preds(&[0, 0, 0, 0], &[0, 0, 1, 1], &[1, 0, 1, 0]);
        let r = fairness_metrics(&p).unwrap();
        assert_eq!(r.dpr, None);
        assert_eq!(r.eor, None);
        assert_eq!(r.undefined_eo_ratios, vec![0, 1]);
        // group 1 has no positives: the y=1 slice is skipped
        let p = preds(&[1, 0, 1, 0], &[0, 0, 1, 1], &[1, 0, 0, 0]);
        let r = fairness_metrics(&p).unwrap();
        assert_eq!(r.skipped_eo_slices, vec![1]);
        assert_eq!(r.eod, Some(0.5));
        assert!(matches!(
            fairness_metrics(&preds(&[1, 0], &[0, 0], &[1, 0])),
            Err(Error::MissingGroup(1))
        ));
    }

    #[test]
    fn deltas() {
        let base = MetricsReport {
            auroc: Some(0.8),
            dpd: 0.10,
            dpr: Some(0.5),
            eod: Some(0.2),
            eor: Some(0.4),
            selection_rates: [0.0; 2],
            conditional_rates: [[None; 2]; 2],
            counts: [[0; 2]; 2],
            skipped_eo_slices: vec![],
            undefined_eo_ratios: vec![],
        };
        let same = baseline_delta(&base, &base);
        assert_eq!(same.auroc_diff, Some(0.0));
        assert!(same.fairness.iter().all(|d| d.percent == Some(0.0)));
        let mut better = base.clone();
        better.dpd = 0.05;
        let d = baseline_delta(&better, &base);
        assert_eq!(d.fairness[0].percent, Some(-50.0));
        assert_eq!(d.fairness[0].improved, Some(true));
        let mut zero = base.clone();
        zero.dpd = 0.0;
        let d = baseline_delta(&better, &zero);
        assert_eq!(d.fairness[0].percent, None);
    }

    fn subgroup_data() -> Dataset {
        // "fair" slice: both groups get identical scores; "unfair": group 1 scores high
        let mut rows = Vec::new();
        for (i, x) in [1.0, -1.0, 1.0, -1.0].iter().enumerate() {
            rows.push(Example::new(vec![*x], if i % 2 == 0 { 1 } else { -1 }, (i / 2) as u8).with_aux("race", "fair"));
        }
        for (i, x) in [-1.0, -1.0, 1.0, 1.0].iter().enumerate() {
            rows.push(Example::new(vec![*x], if i % 2 == 0 { 1 } else { -1 }, (i / 2) as u8).with_aux("race", "unfair"));
        }
        Dataset::from_rows(rows).unwrap()
    }

    #[test]
    fn subgroups_split_fair_from_unfair() {
        let w = ModelWeights::new(vec![1.0], 0.0);
        let rows = subgroup_report(&w, &subgroup_data(), "race", 0.5).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].report.as_ref().unwrap().dpd, 0.0);
        assert!(rows[1].report.as_ref().unwrap().dpd > 0.0);
    }

    #[test]
    fn single_subgroup_equals_overall() {
        let ds = subgroup_data();
        let w = ModelWeights::new(vec![0.7], -0.1);
        let one: Vec<_> = ds.rows().iter().cloned().map(|r| r.with_aux("race", "all")).collect();
        let ds = ds.with_rows(one);
        let rows = subgroup_report(&w, &ds, "race", 0.5).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].report.as_ref().unwrap(), &evaluate(&w, &ds, 0.5).unwrap());
    }

    #[test]
    fn subgroup_with_one_group_is_flagged() {
        let ds = Dataset::from_rows(vec![
            Example::new(vec![1.0], 1, 0).with_aux("race", "a"),
            Example::new(vec![1.0], -1, 0).with_aux("race", "a"),
        ])
        .unwrap();
        let rows = subgroup_report(&ModelWeights::zeros(1), &ds, "race", 0.5).unwrap();
        assert!(rows[0].report.is_none());
    }

    #[test]
    fn subgroup_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.csv");
        let rows = subgroup_report(&ModelWeights::new(vec![1.0], 0.0), &subgroup_data(), "race", 0.5).unwrap();
        write_subgroup_csv(&path, "Race", &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "Race,N,Outcome Prevalence,DPD,DPR,EOD,EOR");
        assert_eq!(text.lines().count(), 3);
    }
}
