//! End-to-end experiments: data preparation, the six-model roster,
//! evaluation on every client's test split and report emission.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    federated_standardize, generate_synthetic, load_csv, partition, split, ClientSplit, ColumnRoles, Dataset,
    PartitionSpec, StandardizationParams,
};
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Framework};
use crate::metrics::{
    average_reports, baseline_delta_values, evaluate, fmt_value, subgroup_report, BaselineDelta, MetricsReport,
    SubgroupRow, METRIC_NAMES,
};
use crate::objective::{ModelWeights, PenaltyConfig, PenaltyForm};
use crate::seed;
use crate::trainer::{train_local, LambdaSweepConfig, TrainConfig};
use crate::tuning::{
    select_lambda, train_and_evaluate, tune_penalty, write_gamma_csv, LambdaPolicy, LambdaSelection, TunedPenalty,
    TuningConfig,
};

/// Roster entries, in canonical report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Central,
    Local,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "perfedavg")]
    PerFedAvg,
    #[serde(rename = "fair-fedavg")]
    FairFedAvg,
    #[serde(rename = "fair-perfedavg")]
    FairPerFedAvg,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Central,
        ModelKind::Local,
        ModelKind::FedAvg,
        ModelKind::PerFedAvg,
        ModelKind::FairFedAvg,
        ModelKind::FairPerFedAvg,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ModelKind::Central => "central",
            ModelKind::Local => "local",
            ModelKind::FedAvg => "fedavg",
            ModelKind::PerFedAvg => "perfedavg",
            ModelKind::FairFedAvg => "fair-fedavg",
            ModelKind::FairPerFedAvg => "fair-perfedavg",
        }
    }

    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Central => "Central Model",
            ModelKind::Local => "Local Model",
            ModelKind::FedAvg => "FedAvg",
            ModelKind::PerFedAvg => "Per-FedAvg",
            ModelKind::FairFedAvg => "Fair FedAvg",
            ModelKind::FairPerFedAvg => "Fair Per-FedAvg",
        }
    }

    pub fn framework(self) -> Option<Framework> {
        match self {
            ModelKind::FedAvg | ModelKind::FairFedAvg => Some(Framework::FedAvg),
            ModelKind::PerFedAvg | ModelKind::FairPerFedAvg => Some(Framework::PerFedAvg),
            _ => None,
        }
    }

    pub fn is_fair(self) -> bool {
        matches!(self, ModelKind::FairFedAvg | ModelKind::FairPerFedAvg)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        n: usize,
        d: usize,
        bias: f64,
        seed: u64,
    },
    /// One cohort file, split into sites by `partition`.
    Csv { path: PathBuf, roles: ColumnRoles },
    /// Already partitioned: one file per site.
    Clients { paths: Vec<PathBuf>, roles: ColumnRoles },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeScope {
    /// Statistics pooled over every row of every site, before splitting.
    #[default]
    FullCohort,
    /// Statistics pooled over training rows only.
    TrainOnly,
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StandardizeConfig {
    #[serde(default)]
    pub scope: StandardizeScope,
    /// Defaults to every continuous feature of the schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Penalty resolution for the fair models. Pinned values skip the matching
/// search.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PenaltySettings {
    #[serde(default)]
    pub form: PenaltyForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub tuning: TuningConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub standardize: StandardizeConfig,
    pub federation: FederationConfig,
    /// Epochs for the central and local models; defaults to
    /// `rounds * train.epochs` so every model sees the same number of passes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<usize>,
    #[serde(default)]
    pub penalty: PenaltySettings,
    pub roster: Vec<ModelKind>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Auxiliary attribute for per-subgroup fairness tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup_attribute: Option<String>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_threshold() -> f64 {
    0.5
}

impl ExperimentConfig {
    /// Synthetic four-site case: 8000 rows, sites skewed by region, all six
    /// models, tuned penalty. Lambda candidates come from the largest
    /// per-site sweep result (three candidates, sweep step 0.1).
    pub fn demo() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic {
                n: 8000,
                d: 6,
                bias: 0.5,
                seed: 2024,
            },
            partition: Some(PartitionSpec {
                attribute: "region".into(),
                strategy: crate::data::PartitionStrategy::CategoricalSkew,
                clients: 4,
                skew: 0.8,
                seed: 7,
            }),
            split: SplitConfig {
                train_fraction: 0.7,
                seed: 11,
            },
            standardize: StandardizeConfig::default(),
            federation: FederationConfig {
                train: TrainConfig {
                    seed: 3,
                    ..TrainConfig::default()
                },
                ..FederationConfig::default()
            },
            local_epochs: None,
            penalty: PenaltySettings {
                tuning: TuningConfig {
                    lambda_policy: LambdaPolicy::Max,
                    lambda_count: 3,
                    sweep: LambdaSweepConfig {
                        step: 0.1,
                        ..LambdaSweepConfig::default()
                    },
                    ..TuningConfig::default()
                },
                ..PenaltySettings::default()
            },
            roster: ModelKind::ALL.to_vec(),
            output_dir: default_output(),
            threshold: 0.5,
            subgroup_attribute: Some("ethnicity".into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.roster.is_empty() {
            return Err(Error::InvalidConfig("model roster is empty".into()));
        }
        match &self.data {
            DataSource::Synthetic { .. } | DataSource::Csv { .. } => {
                if self.partition.is_none() {
                    return Err(Error::InvalidConfig("a single-cohort source needs a [partition] section".into()));
                }
            }
            DataSource::Clients { paths, .. } => {
                if paths.is_empty() {
                    return Err(Error::InvalidConfig("no client files listed".into()));
                }
                for p in paths {
                    if !p.exists() {
                        return Err(Error::InvalidConfig(format!("missing client file {}", p.display())));
                    }
                }
            }
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.exists() {
                return Err(Error::InvalidConfig(format!("missing data file {}", path.display())));
            }
        }
        if let Some(p) = &self.partition {
            p.validate()?;
        }
        self.federation.validate()?;
        self.penalty.tuning.validate()
    }

    /// Roster without duplicates, in canonical order.
    pub fn models(&self) -> Vec<ModelKind> {
        let mut m = self.roster.clone();
        m.sort();
        m.dedup();
        m
    }

    pub fn local_epochs(&self) -> usize {
        self.local_epochs
            .unwrap_or(self.federation.rounds * self.federation.train.epochs)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }
}

/// Reads an experiment config, or the `[config]` table of a run's
/// metadata file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let table = match value.get("config") {
        Some(toml::Value::Table(t)) => t.clone(),
        _ => value,
    };
    table.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))
}

/// Per-site data after loading, partitioning, standardization and splitting.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub clients: Vec<ClientSplit>,
    pub standardization: Option<StandardizationParams>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let sites: Vec<Dataset> = match &cfg.data {
        DataSource::Synthetic { n, d, bias, seed } => {
            let ds = generate_synthetic(*n, *d, *bias, *seed)?;
            partition(&ds, cfg.partition.as_ref().expect("validated"))?
        }
        DataSource::Csv { path, roles } => {
            let ds = load_csv(path, roles)?;
            partition(&ds, cfg.partition.as_ref().expect("validated"))?
        }
        DataSource::Clients { paths, roles } => paths.iter().map(|p| load_csv(p, roles)).collect::<Result<_>>()?,
    };
    let names = cfg
        .standardize
        .features
        .clone()
        .unwrap_or_else(|| sites[0].schema().continuous_features());
    let do_std = cfg.standardize.scope != StandardizeScope::None && !names.is_empty();

    let (sites, mut params) = if do_std && cfg.standardize.scope == StandardizeScope::FullCohort {
        let (p, s) = federated_standardize(&sites, &names)?;
        (s, Some(p))
    } else {
        (sites, None)
    };
    let mut clients = sites
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let (train, test) = split(s, cfg.split.train_fraction, seed::derive_seed(cfg.split.seed, &[k as u64]))
                .map_err(|e| e.in_client(k))?;
            Ok(ClientSplit { train, test })
        })
        .collect::<Result<Vec<_>>>()?;
    if do_std && cfg.standardize.scope == StandardizeScope::TrainOnly {
        let trains: Vec<Dataset> = clients.iter().map(|c| c.train.clone()).collect();
        let (p, _) = federated_standardize(&trains, &names)?;
        for c in &mut clients {
            c.train = p.apply(&c.train)?;
            c.test = p.apply(&c.test)?;
        }
        params = Some(p);
    }
    Ok(PreparedData {
        clients,
        standardization: params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub kind: ModelKind,
    pub penalty: PenaltyConfig,
    pub per_client: Vec<MetricsReport>,
    /// `[AUC, DPD, DPR, EOD, EOR]` unweighted over clients.
    pub average: [Option<f64>; 5],
    /// Clients left out of each average for an undefined value.
    pub excluded: [usize; 5],
    /// Against the central model, per client then for the average.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<BaselineDelta>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_delta: Option<BaselineDelta>,
    /// Global (or central) weights; per-client weights for local and
    /// personalized models.
    pub weights: Vec<ModelWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub group_counts: [usize; 2],
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningAudit {
    pub kind: ModelKind,
    pub tuned: TunedPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub clients: Vec<ClientSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<StandardizationParams>,
    pub models: Vec<ModelResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_selection: Option<LambdaSelection>,
    #[serde(default)]
    pub tuning: Vec<TuningAudit>,
    /// Subgroup tables of the central model on the pooled test rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroups: Option<Vec<SubgroupRow>>,
}

impl ExperimentResult {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.kind == kind)
    }
}

fn evaluate_each(models: &[ModelWeights], clients: &[ClientSplit], threshold: f64) -> Result<Vec<MetricsReport>> {
    models
        .iter()
        .zip(clients)
        .enumerate()
        .map(|(k, (w, c))| evaluate(w, &c.test, threshold).map_err(|e| e.in_client(k)))
        .collect()
}

fn central_model(cfg: &ExperimentConfig, clients: &[ClientSplit]) -> Result<(Vec<ModelWeights>, Vec<MetricsReport>)> {
    let trains: Vec<Dataset> = clients.iter().map(|c| c.train.clone()).collect();
    let pooled = Dataset::concat(&trains)?;
    let tc = TrainConfig {
        epochs: cfg.local_epochs(),
        penalty: PenaltyConfig::none(),
        seed: seed::derive_seed(cfg.federation.train.seed, &[0xCE]),
        ..cfg.federation.train
    };
    let w = train_local(&ModelWeights::zeros(pooled.dim()), &pooled, &tc)?;
    let reports = evaluate_each(&vec![w.clone(); clients.len()], clients, cfg.threshold)?;
    Ok((vec![w], reports))
}

fn local_models(cfg: &ExperimentConfig, clients: &[ClientSplit]) -> Result<(Vec<ModelWeights>, Vec<MetricsReport>)> {
    let weights = clients
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let tc = TrainConfig {
                epochs: cfg.local_epochs(),
                penalty: PenaltyConfig::none(),
                seed: seed::derive_seed(cfg.federation.train.seed, &[0x10C, k as u64]),
                ..cfg.federation.train
            };
            train_local(&ModelWeights::zeros(c.train.dim()), &c.train, &tc).map_err(|e| e.in_client(k))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = evaluate_each(&weights, clients, cfg.threshold)?;
    Ok((weights, reports))
}

fn federated_model(
    cfg: &ExperimentConfig,
    clients: &[ClientSplit],
    framework: Framework,
    penalty: PenaltyConfig,
) -> Result<(Vec<ModelWeights>, Vec<MetricsReport>)> {
    let mut fed = cfg.federation.clone();
    fed.framework = framework;
    let (global, reports) = train_and_evaluate(clients, &fed, penalty, cfg.threshold)?;
    Ok((vec![global], reports))
}

/// Local training config of the per-site lambda sweeps: the federation's
/// training settings over `local_epochs` epochs, penalty form from the
/// config.
pub fn sweep_base_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.local_epochs(),
        penalty: PenaltyConfig::new(0.0, 0.0, cfg.penalty.form),
        ..cfg.federation.train
    }
}

/// The configured federation with `framework` and the configured penalty form.
pub fn federation_for(cfg: &ExperimentConfig, framework: Framework) -> FederationConfig {
    let mut fed = cfg.federation.clone();
    fed.framework = framework;
    fed.train.penalty.form = cfg.penalty.form;
    fed
}

/// Resolves the fair models' penalties: lambda candidates once (shared),
/// then a gamma search per framework.
fn resolve_penalties(
    cfg: &ExperimentConfig,
    clients: &[ClientSplit],
    models: &[ModelKind],
) -> Result<(Option<LambdaSelection>, BTreeMap<ModelKind, (PenaltyConfig, Option<TunedPenalty>)>)> {
    let settings = &cfg.penalty;
    let fair: Vec<ModelKind> = models.iter().copied().filter(|m| m.is_fair()).collect();
    let mut out = BTreeMap::new();
    if fair.is_empty() {
        return Ok((None, out));
    }
    let (selection, lambdas) = match settings.lambda {
        Some(l) => (None, vec![l]),
        None => {
            let t = &settings.tuning;
            let sel = select_lambda(clients, &sweep_base_config(cfg), &t.sweep, t.lambda_policy, t.lambda_count)?;
            let c = sel.candidates.clone();
            (Some(sel), c)
        }
    };
    for kind in fair {
        let fed = federation_for(cfg, kind.framework().expect("fair models are federated"));
        if let (Some(l), Some(g)) = (settings.lambda, settings.gamma) {
            out.insert(kind, (PenaltyConfig::new(l, g, settings.form), None));
            continue;
        }
        let tuning = TuningConfig {
            threshold: cfg.threshold,
            ..settings.tuning.clone()
        };
        let tuned = tune_penalty(&lambdas, settings.gamma, clients, &fed, &tuning)
            .map_err(|e| e.in_model(kind.key()))?;
        out.insert(kind, (PenaltyConfig::new(tuned.lambda, tuned.gamma, settings.form), Some(tuned)));
    }
    Ok((selection, out))
}

/// Runs every roster model and evaluates it on every client's test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let prepared = prepare_data(cfg)?;
    run_on_clients(cfg, &prepared.clients, prepared.standardization)
}

/// As [`run_experiment`], on already prepared client splits.
pub fn run_on_clients(
    cfg: &ExperimentConfig,
    clients: &[ClientSplit],
    standardization: Option<StandardizationParams>,
) -> Result<ExperimentResult> {
    let models = cfg.models();
    let (lambda_selection, penalties) = resolve_penalties(cfg, clients, &models)?;

    let runs: Vec<(ModelKind, PenaltyConfig, (Vec<ModelWeights>, Vec<MetricsReport>))> = models
        .par_iter()
        .map(|&kind| {
            let penalty = penalties
                .get(&kind)
                .map(|p| p.0)
                .unwrap_or_else(|| PenaltyConfig::new(0.0, 0.0, cfg.penalty.form));
            let out = match kind {
                ModelKind::Central => central_model(cfg, clients),
                ModelKind::Local => local_models(cfg, clients),
                _ => federated_model(cfg, clients, kind.framework().expect("federated"), penalty),
            }
            .map_err(|e| e.in_model(kind.key()))?;
            Ok((kind, penalty, out))
        })
        .collect::<Result<_>>()?;

    let central = runs.iter().find(|r| r.0 == ModelKind::Central).map(|r| {
        let reports = &r.2 .1;
        (reports.clone(), average_reports(reports).0)
    });
    let model_results = runs
        .into_iter()
        .map(|(kind, penalty, (weights, per_client))| {
            let (average, excluded) = average_reports(&per_client);
            let (deltas, average_delta) = match &central {
                Some((base, base_avg)) => (
                    Some(
                        per_client
                            .iter()
                            .zip(base)
                            .map(|(r, b)| baseline_delta_values(&r.values(), &b.values()))
                            .collect(),
                    ),
                    Some(baseline_delta_values(&average, base_avg)),
                ),
                None => (None, None),
            };
            ModelResult {
                kind,
                penalty,
                per_client,
                average,
                excluded,
                deltas,
                average_delta,
                weights,
            }
        })
        .collect::<Vec<_>>();

    let subgroups = match (&cfg.subgroup_attribute, model_results.iter().find(|m| m.kind == ModelKind::Central)) {
        (Some(attr), Some(central)) => {
            let tests: Vec<Dataset> = clients.iter().map(|c| c.test.clone()).collect();
            let pooled = Dataset::concat(&tests)?;
            Some(subgroup_report(&central.weights[0], &pooled, attr, cfg.threshold)?)
        }
        _ => None,
    };

    Ok(ExperimentResult {
        config: cfg.clone(),
        clients: clients
            .iter()
            .map(|c| ClientSummary {
                n_train: c.train.len(),
                n_test: c.test.len(),
                group_counts: {
                    let (a, b) = (c.train.group_counts(), c.test.group_counts());
                    [a[0] + b[0], a[1] + b[1]]
                },
                prevalence: (c.train.prevalence() * c.train.len() as f64 + c.test.prevalence() * c.test.len() as f64)
                    / (c.train.len() + c.test.len()) as f64,
            })
            .collect(),
        standardization,
        models: model_results,
        lambda_selection,
        tuning: penalties
            .into_iter()
            .filter_map(|(kind, (_, t))| t.map(|tuned| TuningAudit { kind, tuned }))
            .collect(),
        subgroups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Metadata,
    Json,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 4] = [
        ReportFormat::Csv,
        ReportFormat::Markdown,
        ReportFormat::Metadata,
        ReportFormat::Json,
    ];
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "meta" | "metadata" => Ok(ReportFormat::Metadata),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::InvalidConfig(format!("unknown report format `{s}`"))),
        }
    }
}

pub const REPORT_HEADER: [&str; 7] = ["Testing Data", "Model", "AUC", "DPD", "DPR", "EOD", "EOR"];
pub const DELTA_HEADER: [&str; 7] = ["Testing Data", "Model", "AUC_diff", "DPD_pct", "DPR_pct", "EOD_pct", "EOR_pct"];

/// `(row label, model, values)` in report order: clients first, then the
/// Average block.
pub fn report_rows(result: &ExperimentResult) -> Vec<(String, ModelKind, [Option<f64>; 5])> {
    let mut rows = Vec::new();
    for k in 0..result.clients.len() {
        for m in &result.models {
            rows.push((format!("Client {}", k + 1), m.kind, m.per_client[k].values()));
        }
    }
    for m in &result.models {
        rows.push(("Average".to_string(), m.kind, m.average));
    }
    rows
}

fn delta_rows(result: &ExperimentResult) -> Option<Vec<(String, ModelKind, BaselineDelta)>> {
    let mut rows = Vec::new();
    for k in 0..result.clients.len() {
        for m in &result.models {
            rows.push((format!("Client {}", k + 1), m.kind, m.deltas.as_ref()?[k].clone()));
        }
    }
    for m in &result.models {
        rows.push(("Average".to_string(), m.kind, m.average_delta.clone()?));
    }
    Some(rows)
}

fn write_report_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for (label, kind, vals) in report_rows(result) {
        let mut rec = vec![label, kind.label().to_string()];
        rec.extend(vals.iter().map(|v| fmt_value(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_delta_csv(path: &Path, rows: &[(String, ModelKind, BaselineDelta)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DELTA_HEADER)?;
    for (label, kind, d) in rows {
        let mut rec = vec![label.clone(), kind.label().to_string(), fmt_value(d.auroc_diff)];
        rec.extend(d.fairness.iter().map(|m| fmt_value(m.percent)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn md_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn markdown(result: &ExperimentResult) -> String {
    let mut s = String::new();
    s.push_str("# Experiment report\n\n");
    s.push_str(&format!("| {} |\n", REPORT_HEADER.join(" | ")));
    s.push_str(&format!("|{}\n", "---|".repeat(REPORT_HEADER.len())));
    let deltas = delta_rows(result);
    let rows = report_rows(result);
    let mut last_label = String::new();
    for (i, (label, kind, vals)) in rows.iter().enumerate() {
        let shown = if *label == last_label { String::new() } else { label.clone() };
        last_label = label.clone();
        let mut cells = vec![shown, kind.label().to_string(), md_value(vals[0])];
        for (j, v) in vals[1..].iter().enumerate() {
            let mut cell = md_value(*v);
            if label == "Average" && *kind != ModelKind::Central {
                if let Some(p) = deltas.as_ref().and_then(|d| d[i].2.fairness[j].percent) {
                    cell.push_str(&format!(" ({p:+.1}%)"));
                }
            }
            cells.push(cell);
        }
        s.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    s.push_str("\nLower DPD/EOD and higher DPR/EOR indicate greater fairness. ");
    s.push_str("Percentages on Average rows are relative changes against the central model.\n");
    for m in &result.models {
        if m.kind.is_fair() {
            s.push_str(&format!(
                "\n{}: lambda = {}, gamma = {}",
                m.kind.label(),
                m.penalty.lambda,
                m.penalty.gamma
            ));
        }
    }
    if let Some(sub) = &result.subgroups {
        let attr = result.config.subgroup_attribute.as_deref().unwrap_or("subgroup");
        s.push_str(&format!(
            "\n\n## Central model by {attr}\n\n| {attr} | N | Outcome Prevalence | DPD | DPR | EOD | EOR |\n|---|---|---|---|---|---|---|\n"
        ));
        for r in sub {
            let f = r.report.as_ref().map(|m| m.fairness_values()).unwrap_or([None; 4]);
            s.push_str(&format!(
                "| {} | {} | {:.4} | {} |\n",
                r.label,
                r.n,
                r.prevalence,
                f.iter().map(|v| md_value(*v)).collect::<Vec<_>>().join(" | ")
            ));
        }
    }
    s.push('\n');
    s
}

#[derive(Serialize)]
struct ResolvedModel {
    model: ModelKind,
    lambda: f64,
    gamma: f64,
    form: PenaltyForm,
}

#[derive(Serialize)]
struct Metadata<'a> {
    generator: String,
    config: &'a ExperimentConfig,
    resolved: Vec<ResolvedModel>,
    seeds: BTreeMap<&'static str, u64>,
}

fn metadata(result: &ExperimentResult) -> Result<String> {
    let cfg = &result.config;
    let mut seeds = BTreeMap::new();
    if let DataSource::Synthetic { seed, .. } = cfg.data {
        seeds.insert("synthetic", seed);
    }
    if let Some(p) = &cfg.partition {
        seeds.insert("partition", p.seed);
    }
    seeds.insert("split", cfg.split.seed);
    seeds.insert("train", cfg.federation.train.seed);
    let meta = Metadata {
        generator: format!("fairfed {}", env!("CARGO_PKG_VERSION")),
        config: cfg,
        resolved: result
            .models
            .iter()
            .map(|m| ResolvedModel {
                model: m.kind,
                lambda: m.penalty.lambda,
                gamma: m.penalty.gamma,
                form: m.penalty.form,
            })
            .collect(),
        seeds,
    };
    toml::to_string(&meta).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn write_result_json(path: &Path, result: &ExperimentResult) -> Result<()> {
    let text = serde_json::to_string_pretty(result).map_err(|e| Error::Serialize(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_result_json(path: &Path) -> Result<ExperimentResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialize(e.to_string()))
}

/// Writes the requested formats into `dir` and returns the written paths.
///
/// CSV: `report.csv` (client x model rows plus the Average block, columns
/// AUC, DPD, DPR, EOD, EOR), `deltas.csv` when the central model ran, and
/// tuning audit tables. Markdown: `report.md`. Metadata: `metadata.toml`,
/// which `load_config` accepts to re-run the experiment. Json: `result.json`.
pub fn emit_report(result: &ExperimentResult, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &f in formats {
        match f {
            ReportFormat::Csv => {
                let p = dir.join("report.csv");
                write_report_csv(&p, result)?;
                written.push(p);
                if let Some(rows) = delta_rows(result) {
                    let p = dir.join("deltas.csv");
                    write_delta_csv(&p, &rows)?;
                    written.push(p);
                }
                if let Some(sel) = &result.lambda_selection {
                    for (k, s) in sel.per_client.iter().enumerate() {
                        let p = dir.join(format!("lambda_sweep_client_{}.csv", k + 1));
                        crate::trainer::write_sweep_csv(&p, s)?;
                        written.push(p);
                    }
                }
                for audit in &result.tuning {
                    for s in &audit.tuned.searches {
                        for (stage, search) in [("coarse", &s.coarse), ("refined", &s.refined)] {
                            let p = dir.join(format!("gamma_{}_lambda_{}_{stage}.csv", audit.kind.key(), search.lambda));
                            write_gamma_csv(&p, search)?;
                            written.push(p);
                        }
                    }
                }
                if let (Some(sub), Some(attr)) = (&result.subgroups, &result.config.subgroup_attribute) {
                    let p = dir.join("subgroups.csv");
                    crate::metrics::write_subgroup_csv(&p, attr, sub)?;
                    written.push(p);
                }
            }
            ReportFormat::Markdown => {
                let p = dir.join("report.md");
                fs::write(&p, markdown(result)).map_err(|e| Error::io(&p, e))?;
                written.push(p);
            }
            ReportFormat::Metadata => {
                let p = dir.join("metadata.toml");
                fs::write(&p, metadata(result)?).map_err(|e| Error::io(&p, e))?;
                written.push(p);
            }
            ReportFormat::Json => {
                let p = dir.join("result.json");
                write_result_json(&p, result)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// Parses a report CSV back into `(row label, model label, values)`.
pub fn read_report_csv(path: &Path) -> Result<Vec<(String, String, [Option<f64>; 5])>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::InvalidConfig(format!("unexpected report header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut vals = [None; 5];
        for (m, v) in vals.iter_mut().enumerate() {
            let cell = &rec[m + 2];
            *v = if cell == "NA" {
                None
            } else {
                Some(cell.parse().map_err(|_| Error::NonNumeric {
                    line: rec.position().map_or(0, |p| p.line()),
                    column: METRIC_NAMES[m].to_string(),
                    value: cell.to_string(),
                })?)
            };
        }
        out.push((rec[0].to_string(), rec[1].to_string(), vals));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::demo();
        c.data = DataSource::Synthetic {
            n: 1200,
            d: 4,
            bias: 1.5,
            seed: 5,
        };
        c.federation.rounds = 3;
        c.penalty.lambda = Some(1.0);
        c.penalty.gamma = Some(0.01);
        c
    }

    #[test]
    fn defaults_follow_reported_hyperparameters() {
        let c = ExperimentConfig::demo();
        assert_eq!(c.federation.train.learning_rate, 0.1);
        assert_eq!(c.federation.train.batch_size, 128);
        assert_eq!(c.federation.rounds, 10);
        assert_eq!(c.federation.inner_steps, 1);
        assert_eq!(c.penalty.tuning.coarse_points, 10);
        assert_eq!(c.penalty.tuning.refined_points, 10);
        assert_eq!(c.penalty.tuning.gamma_range, [0.0001, 0.1]);
        assert_eq!(c.split.train_fraction, 0.7);
    }

    #[test]
    fn config_toml_round_trip() {
        let c = ExperimentConfig::demo();
        assert_eq!(parse_config(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn central_only_roster() {
        let mut c = small();
        c.roster = vec![ModelKind::Central];
        let r = run_experiment(&c).unwrap();
        assert_eq!(report_rows(&r).len(), 4 + 1);
        let central = r.model(ModelKind::Central).unwrap();
        for d in central.deltas.as_ref().unwrap() {
            assert_eq!(d.auroc_diff, Some(0.0));
            assert!(d.fairness.iter().all(|m| m.percent.is_none() || m.percent == Some(0.0)));
        }
    }

    #[test]
    fn roster_order_does_not_matter() {
        let mut a = small();
        a.roster = vec![ModelKind::FedAvg, ModelKind::Central, ModelKind::Local];
        let mut b = a.clone();
        b.roster = vec![ModelKind::Local, ModelKind::FedAvg, ModelKind::Central];
        let (ra, rb) = (run_experiment(&a).unwrap(), run_experiment(&b).unwrap());
        assert_eq!(ra.models, rb.models);
    }

    #[test]
    fn empty_roster_is_refused() {
        let mut c = small();
        c.roster.clear();
        assert!(matches!(run_experiment(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn train_only_standardization_uses_train_rows() {
        let mut c = small();
        c.standardize.scope = StandardizeScope::TrainOnly;
        let p = prepare_data(&c).unwrap();
        let mut sums = vec![0.0; 4];
        let mut n = 0.0;
        for cl in &p.clients {
            for r in cl.train.rows() {
                for (s, x) in sums.iter_mut().zip(&r.features) {
                    *s += x;
                }
                n += 1.0;
            }
        }
        assert!(sums.iter().all(|s| (s / n).abs() < 1e-12));
    }
}
