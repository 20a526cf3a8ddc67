//! In-process federated orchestration (FedAvg and first-order Per-FedAvg).
//!
//! Clients only ever hand back a [`ClientUpdate`] (weights plus a sample
//! count); the server only ever broadcasts a [`GlobalModel`]. Both have a
//! flat wire form so a network transport could replace the in-process calls.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objective::{objective_and_gradient, ModelWeights, PenaltyConfig};
use crate::seed;
use crate::trainer::{train_with_rule, StepRule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    #[default]
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "perfedavg")]
    PerFedAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// `w = (1/K) sum_k w_k`.
    #[default]
    Uniform,
    /// `w = sum_k (n_k / N) w_k`.
    SampleWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    #[serde(default)]
    pub framework: Framework,
    pub rounds: usize,
    pub train: TrainConfig,
    /// Per-client local epochs; falls back to `train.epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_epochs: Option<Vec<usize>>,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Per-FedAvg adaptation steps, both in training and at evaluation.
    pub inner_steps: usize,
    /// Per-FedAvg adaptation rate.
    pub inner_lr: f64,
    /// Run the clients of a round on the rayon pool.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_true() -> bool {
    true
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            framework: Framework::FedAvg,
            rounds: 10,
            train: TrainConfig::default(),
            client_epochs: None,
            aggregation: Aggregation::Uniform,
            inner_steps: 1,
            inner_lr: 0.1,
            parallel: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 || self.inner_steps < 1 {
            return Err(Error::InvalidConfig("rounds and inner steps must be at least 1".into()));
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("inner rate {} invalid", self.inner_lr)));
        }
        if let Some(e) = &self.client_epochs {
            if e.iter().any(|&x| x < 1) {
                return Err(Error::InvalidConfig("client epochs must be at least 1".into()));
            }
        }
        self.train.validate()
    }

    pub fn with_penalty(&self, penalty: PenaltyConfig) -> Self {
        let mut c = self.clone();
        c.train.penalty = penalty;
        c
    }

    fn step_rule(&self) -> StepRule {
        match self.framework {
            Framework::FedAvg => StepRule::Sgd,
            Framework::PerFedAvg => StepRule::FirstOrderMeta {
                inner_steps: self.inner_steps,
                inner_lr: self.inner_lr,
            },
        }
    }

    /// Training config client `client` uses in `round` (1-based).
    pub fn client_train_config(&self, client: usize, round: usize) -> TrainConfig {
        let mut cfg = self.train;
        cfg.seed = client_seed(self.train.seed, client, round);
        if let Some(e) = self.client_epochs.as_ref().and_then(|e| e.get(client)) {
            cfg.epochs = *e;
        }
        cfg
    }
}

/// Seed of client `client`'s stream in `round`.
pub fn client_seed(base: u64, client: usize, round: usize) -> u64 {
    seed::derive_seed(base, &[seed::TAG_CLIENT, client as u64, round as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub round: usize,
    pub n_samples: usize,
    pub weights: ModelWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub round: usize,
    pub weights: ModelWeights,
}

impl GlobalModel {
    pub fn initial(d: usize) -> Self {
        GlobalModel {
            round: 0,
            weights: ModelWeights::zeros(d),
        }
    }
}

/// Flat message layout shared by both directions. `params` is
/// `[w_0, .., w_{d-1}, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub kind: String,
    pub round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    pub dim: usize,
    pub params: Vec<f64>,
}

const KIND_UPDATE: &str = "client-update";
const KIND_GLOBAL: &str = "global-model";

fn decode_params(msg: &WireMessage, kind: &str) -> Result<ModelWeights> {
    if msg.kind != kind {
        return Err(Error::Serialize(format!("expected {kind}, got {}", msg.kind)));
    }
    if msg.params.len() != msg.dim + 1 {
        return Err(Error::DimensionMismatch {
            expected: msg.dim + 1,
            found: msg.params.len(),
        });
    }
    let w = ModelWeights::from_flat(&msg.params)?;
    if !w.is_finite() {
        return Err(Error::Serialize("non-finite parameters".into()));
    }
    Ok(w)
}

impl ClientUpdate {
    pub fn to_wire(&self) -> WireMessage {
        WireMessage {
            kind: KIND_UPDATE.into(),
            round: self.round,
            client: Some(self.client),
            n_samples: Some(self.n_samples),
            dim: self.weights.dim(),
            params: self.weights.to_flat(),
        }
    }

    pub fn from_wire(msg: &WireMessage) -> Result<Self> {
        let weights = decode_params(msg, KIND_UPDATE)?;
        let n_samples = msg.n_samples.filter(|&n| n >= 1).ok_or_else(|| {
            Error::Serialize("client update needs n_samples >= 1".into())
        })?;
        Ok(ClientUpdate {
            client: msg.client.ok_or_else(|| Error::Serialize("client update without client id".into()))?,
            round: msg.round,
            n_samples,
            weights,
        })
    }
}

impl GlobalModel {
    pub fn to_wire(&self) -> WireMessage {
        WireMessage {
            kind: KIND_GLOBAL.into(),
            round: self.round,
            client: None,
            n_samples: None,
            dim: self.weights.dim(),
            params: self.weights.to_flat(),
        }
    }

    pub fn from_wire(msg: &WireMessage) -> Result<Self> {
        Ok(GlobalModel {
            round: msg.round,
            weights: decode_params(msg, KIND_GLOBAL)?,
        })
    }
}

pub fn to_json(msg: &WireMessage) -> Result<String> {
    serde_json::to_string(msg).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn from_json(text: &str) -> Result<WireMessage> {
    serde_json::from_str(text).map_err(|e| Error::Serialize(e.to_string()))
}

/// Weighted mean of one coordinate: values are visited in sorted order and
/// accumulated as offsets from the smallest, so the result does not depend
/// on client order and equals the common value when all inputs agree.
fn coordinate_mean(pairs: &mut [(f64, f64)], total: f64) -> f64 {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let base = pairs[0].0;
    base + pairs.iter().map(|(v, wt)| (v - base) * wt).sum::<f64>() / total
}

/// Server-side averaging of one round's updates.
pub fn aggregate(updates: &[ClientUpdate], mode: Aggregation) -> Result<GlobalModel> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Empty("no client updates to aggregate".into()))?;
    let d = first.weights.dim();
    let rounds: Vec<usize> = updates.iter().map(|u| u.round).collect();
    if rounds.iter().any(|&r| r != first.round) {
        return Err(Error::MixedRounds(rounds));
    }
    for u in updates {
        if u.weights.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: u.weights.dim(),
            });
        }
        if !u.weights.is_finite() || u.n_samples == 0 {
            return Err(Error::InvalidConfig(format!(
                "client {} sent non-finite weights or zero samples",
                u.client
            )));
        }
    }
    let weight_of = |u: &ClientUpdate| match mode {
        Aggregation::Uniform => 1.0,
        Aggregation::SampleWeighted => u.n_samples as f64,
    };
    let total: f64 = updates.iter().map(weight_of).sum();
    let mut pairs = Vec::with_capacity(updates.len());
    let mut coord = |get: &dyn Fn(&ModelWeights) -> f64| {
        pairs.clear();
        pairs.extend(updates.iter().map(|u| (get(&u.weights), weight_of(u))));
        coordinate_mean(&mut pairs, total)
    };
    let w = (0..d).map(|j| coord(&|m: &ModelWeights| m.w[j])).collect();
    let b = coord(&|m: &ModelWeights| m.b);
    Ok(GlobalModel {
        round: first.round,
        weights: ModelWeights { w, b },
    })
}

/// Local work of one client in the round after `global`.
pub fn client_update(
    global: &GlobalModel,
    client: usize,
    data: &Dataset,
    cfg: &FederationConfig,
) -> Result<ClientUpdate> {
    let round = global.round + 1;
    let tc = cfg.client_train_config(client, round);
    let weights = train_with_rule(&global.weights, data, &tc, cfg.step_rule()).map_err(|e| e.in_client(client))?;
    Ok(ClientUpdate {
        client,
        round,
        n_samples: data.len(),
        weights,
    })
}

/// Broadcast, local training on every client, then aggregation.
pub fn run_round(global: &GlobalModel, clients: &[Dataset], cfg: &FederationConfig) -> Result<GlobalModel> {
    if clients.is_empty() {
        return Err(Error::Empty("round without clients".into()));
    }
    let work = |(k, data): (usize, &Dataset)| client_update(global, k, data, cfg);
    let updates: Vec<ClientUpdate> = if cfg.parallel {
        clients.par_iter().enumerate().map(work).collect::<Result<_>>()?
    } else {
        clients.iter().enumerate().map(work).collect::<Result<_>>()?
    };
    aggregate(&updates, cfg.aggregation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationRun {
    pub final_model: GlobalModel,
    /// `rounds + 1` entries; entry 0 is the zero initialization.
    pub history: Vec<GlobalModel>,
}

/// `cfg.rounds` rounds from zero weights over the clients' training sets.
pub fn run_federation(train_sets: &[Dataset], cfg: &FederationConfig) -> Result<FederationRun> {
    cfg.validate()?;
    let d = train_sets
        .first()
        .map(Dataset::dim)
        .ok_or_else(|| Error::Empty("federation without clients".into()))?;
    let mut history = vec![GlobalModel::initial(d)];
    for _ in 0..cfg.rounds {
        let next = run_round(history.last().expect("history starts non-empty"), train_sets, cfg)?;
        history.push(next);
    }
    Ok(FederationRun {
        final_model: history.last().cloned().expect("non-empty"),
        history,
    })
}

/// The model each client is evaluated with: the global weights for FedAvg,
/// a personalized copy for Per-FedAvg.
pub fn client_models(global: &GlobalModel, train_sets: &[Dataset], cfg: &FederationConfig) -> Result<Vec<ModelWeights>> {
    match cfg.framework {
        Framework::FedAvg => Ok(vec![global.weights.clone(); train_sets.len()]),
        Framework::PerFedAvg => train_sets
            .iter()
            .enumerate()
            .map(|(k, t)| {
                personalize(global, t, &cfg.train.penalty, cfg.inner_steps, cfg.inner_lr).map_err(|e| e.in_client(k))
            })
            .collect(),
    }
}

/// `steps` full-batch gradient steps of rate `alpha` from the global weights
/// on a client's own training rows.
pub fn personalize(
    global: &GlobalModel,
    client_train: &Dataset,
    penalty: &PenaltyConfig,
    steps: usize,
    alpha: f64,
) -> Result<ModelWeights> {
    if client_train.is_empty() {
        return Err(Error::Empty("personalization on an empty dataset".into()));
    }
    let mut w = global.weights.clone();
    for _ in 0..steps {
        let (_, g) = objective_and_gradient(&w, client_train.rows(), penalty)?;
        w = w.descend(&g, alpha);
    }
    Ok(w)
}
