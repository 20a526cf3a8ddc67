//! Tabular datasets: ingestion, standardization, partitioning into simulated
//! sites, train/test splitting and a synthetic generator.
//!
//! Outcomes are stored as `-1`/`+1` internally; CSV files use `0`/`1`.
//! The sensitive attribute is a binary group id in `{0, 1}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Continuous,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Binary,
        }
    }
}

/// Column roles for reading a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub features: Vec<FeatureSpec>,
    pub outcome: String,
    pub group: String,
    /// Declared ordering of the two group categories (first maps to 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_levels: Option<[String; 2]>,
    #[serde(default)]
    pub aux: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<FeatureSpec>,
    pub outcome_column: String,
    pub group_column: String,
    pub group_levels: [String; 2],
    pub aux: Vec<String>,
}

impl Schema {
    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn continuous_features(&self) -> Vec<String> {
        self.features
            .iter()
            .filter(|f| f.kind == FeatureKind::Continuous)
            .map(|f| f.name.clone())
            .collect()
    }

    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles {
            features: self.features.clone(),
            outcome: self.outcome_column.clone(),
            group: self.group_column.clone(),
            group_levels: Some(self.group_levels.clone()),
            aux: self.aux.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    /// `-1` or `+1`.
    pub outcome: i8,
    /// `0` or `1`.
    pub group: u8,
    pub aux: BTreeMap<String, String>,
}

impl Example {
    pub fn new(features: Vec<f64>, outcome: i8, group: u8) -> Self {
        Example {
            features,
            outcome,
            group,
            aux: BTreeMap::new(),
        }
    }

    pub fn with_aux(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.aux.insert(key.into(), value.into());
        self
    }

    /// Outcome as `0.0`/`1.0`.
    pub fn outcome01(&self) -> f64 {
        if self.outcome > 0 {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<Example>,
}

impl Dataset {
    pub fn new(schema: Schema, rows: Vec<Example>) -> Result<Self> {
        let d = schema.dim();
        if d == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one feature".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.features.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.features.len(),
                });
            }
            if row.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("row {i} has non-finite features")));
            }
            if row.outcome != 1 && row.outcome != -1 {
                return Err(Error::InvalidConfig(format!(
                    "row {i} outcome {} not in {{-1, +1}}",
                    row.outcome
                )));
            }
            if row.group > 1 {
                return Err(Error::InvalidConfig(format!(
                    "row {i} group {} not in {{0, 1}}",
                    row.group
                )));
            }
        }
        Ok(Dataset { schema, rows })
    }

    /// Dataset with anonymous continuous features `x0..x{d-1}`.
    pub fn from_rows(rows: Vec<Example>) -> Result<Self> {
        let d = rows
            .first()
            .map(|r| r.features.len())
            .ok_or_else(|| Error::Empty("no rows".into()))?;
        let aux: BTreeSet<String> = rows.iter().flat_map(|r| r.aux.keys().cloned()).collect();
        let schema = Schema {
            features: (0..d).map(|j| FeatureSpec::continuous(format!("x{j}"))).collect(),
            outcome_column: "outcome".into(),
            group_column: "group".into(),
            group_levels: ["0".into(), "1".into()],
            aux: aux.into_iter().collect(),
        };
        Dataset::new(schema, rows)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Example] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Example> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.schema.dim()
    }

    /// Same schema, different rows.
    pub fn with_rows(&self, rows: Vec<Example>) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        self.with_rows(indices.iter().map(|&i| self.rows[i].clone()).collect())
    }

    /// Concatenates datasets sharing one schema.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
        let mut rows = Vec::with_capacity(parts.iter().map(Dataset::len).sum());
        for p in parts {
            if p.schema.features != first.schema.features {
                return Err(Error::InvalidConfig("cannot pool datasets with different schemas".into()));
            }
            rows.extend(p.rows.iter().cloned());
        }
        Ok(first.with_rows(rows))
    }

    /// Row counts per group.
    pub fn group_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for r in &self.rows {
            c[r.group as usize] += 1;
        }
        c
    }

    /// Fraction of positive outcomes; 0 on an empty dataset.
    pub fn prevalence(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.outcome > 0).count() as f64 / self.rows.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<&str> = self.schema.features.iter().map(|f| f.name.as_str()).collect();
        header.push(&self.schema.outcome_column);
        header.push(&self.schema.group_column);
        header.extend(self.schema.aux.iter().map(String::as_str));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.features.iter().map(|v| v.to_string()).collect();
            rec.push(if row.outcome > 0 { "1" } else { "0" }.to_string());
            rec.push(self.schema.group_levels[row.group as usize].clone());
            for a in &self.schema.aux {
                rec.push(row.aux.get(a).cloned().unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn parse_outcome(raw: &str, line: u64, column: &str) -> Result<i8> {
    let bad = || Error::InvalidOutcome {
        line,
        column: column.to_string(),
        value: raw.to_string(),
    };
    let v: f64 = raw.trim().parse().map_err(|_| bad())?;
    if v == 1.0 {
        Ok(1)
    } else if v == 0.0 || v == -1.0 {
        Ok(-1)
    } else {
        Err(bad())
    }
}

/// Resolves the group level ordering when none was declared: numeric
/// levels sort numerically, anything else lexicographically.
fn infer_levels(values: &BTreeSet<String>) -> [String; 2] {
    let mut v: Vec<&String> = values.iter().collect();
    let numeric: Option<Vec<f64>> = v.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, &String)> = nums.into_iter().zip(v.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        v = pairs.into_iter().map(|p| p.1).collect();
        if v.len() == 1 {
            // A lone "1" is still group 1.
            return match v[0].trim().parse::<f64>() {
                Ok(x) if x == 1.0 => ["0".into(), v[0].clone()],
                _ => [v[0].clone(), "1".into()],
            };
        }
    }
    match v.len() {
        0 => ["0".into(), "1".into()],
        1 => [v[0].clone(), format!("not-{}", v[0])],
        _ => [v[0].clone(), v[1].clone()],
    }
}

/// Reads a CSV file with a header row.
pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, roles)
}

pub fn read_csv<R: std::io::Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let feat_cols: Vec<usize> = roles.features.iter().map(|f| col(&f.name)).collect::<Result<_>>()?;
    let outcome_col = col(&roles.outcome)?;
    let group_col = col(&roles.group)?;
    let aux_cols: Vec<usize> = roles.aux.iter().map(|a| col(a)).collect::<Result<_>>()?;

    let mut parsed = Vec::new();
    let mut group_raw = Vec::new();
    let mut levels_seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let mut features = Vec::with_capacity(feat_cols.len());
        for (spec, &c) in roles.features.iter().zip(&feat_cols) {
            let raw = rec.get(c).unwrap_or("");
            let v: f64 = raw
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::NonNumeric {
                    line,
                    column: spec.name.clone(),
                    value: raw.to_string(),
                })?;
            features.push(v);
        }
        let outcome = parse_outcome(rec.get(outcome_col).unwrap_or(""), line, &roles.outcome)?;
        let g = rec.get(group_col).unwrap_or("").to_string();
        levels_seen.insert(g.clone());
        let aux = roles
            .aux
            .iter()
            .zip(&aux_cols)
            .map(|(name, &c)| (name.clone(), rec.get(c).unwrap_or("").to_string()))
            .collect();
        parsed.push((features, outcome, aux));
        group_raw.push(g);
    }
    if parsed.is_empty() {
        return Err(Error::Empty("CSV file has no data rows".into()));
    }
    if levels_seen.len() > 2 {
        return Err(Error::NonBinaryGroup {
            column: roles.group.clone(),
            values: levels_seen.into_iter().collect(),
        });
    }
    let levels = match &roles.group_levels {
        Some(l) => {
            if let Some(bad) = levels_seen.iter().find(|v| !l.contains(v)) {
                return Err(Error::NonBinaryGroup {
                    column: roles.group.clone(),
                    values: vec![bad.clone()],
                });
            }
            l.clone()
        }
        None => infer_levels(&levels_seen),
    };
    let rows = parsed
        .into_iter()
        .zip(group_raw)
        .map(|((features, outcome, aux), g)| Example {
            features,
            outcome,
            group: if g == levels[0] { 0 } else { 1 },
            aux,
        })
        .collect();
    let schema = Schema {
        features: roles.features.clone(),
        outcome_column: roles.outcome.clone(),
        group_column: roles.group.clone(),
        group_levels: levels,
        aux: roles.aux.clone(),
    };
    Dataset::new(schema, rows)
}

/// Per-feature sufficient statistics a client shares for pooled
/// standardization. No rows leave the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMoments {
    pub count: usize,
    pub sums: Vec<f64>,
    pub sums_sq: Vec<f64>,
}

impl ClientMoments {
    pub fn compute(data: &Dataset, indices: &[usize]) -> Self {
        let mut sums = vec![0.0; indices.len()];
        let mut sums_sq = vec![0.0; indices.len()];
        for row in data.rows() {
            for (k, &j) in indices.iter().enumerate() {
                let v = row.features[j];
                sums[k] += v;
                sums_sq[k] += v * v;
            }
        }
        ClientMoments {
            count: data.len(),
            sums,
            sums_sq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub mean: f64,
    pub sd: f64,
}

/// Pooled mean and sample standard deviation (denominator `n - 1`) per
/// continuous feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub features: BTreeMap<String, FeatureScale>,
}

impl StandardizationParams {
    pub fn from_moments(names: &[String], moments: &[ClientMoments]) -> Result<Self> {
        let n: usize = moments.iter().map(|m| m.count).sum();
        if n < 2 {
            return Err(Error::Empty("standardization needs at least two rows".into()));
        }
        let nf = n as f64;
        let mut features = BTreeMap::new();
        for (k, name) in names.iter().enumerate() {
            let sum: f64 = moments.iter().map(|m| m.sums[k]).sum();
            let sum_sq: f64 = moments.iter().map(|m| m.sums_sq[k]).sum();
            let mean = sum / nf;
            let var = ((sum_sq - sum * mean) / (nf - 1.0)).max(0.0);
            let sd = var.sqrt();
            if !(sd > 0.0) || sd <= 1e-12 * mean.abs().max(1.0) {
                return Err(Error::ZeroVariance {
                    feature: name.clone(),
                });
            }
            features.insert(name.clone(), FeatureScale { mean, sd });
        }
        Ok(StandardizationParams { features })
    }

    /// Replaces every named feature by `(x - mean) / sd`.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let cols: Vec<(usize, FeatureScale)> = self
            .features
            .iter()
            .map(|(name, s)| {
                data.schema()
                    .feature_index(name)
                    .map(|j| (j, *s))
                    .ok_or_else(|| Error::MissingColumn { column: name.clone() })
            })
            .collect::<Result<_>>()?;
        let rows = data
            .rows()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                for &(j, s) in &cols {
                    r.features[j] = (r.features[j] - s.mean) / s.sd;
                }
                r
            })
            .collect();
        Ok(data.with_rows(rows))
    }
}

fn feature_indices(data: &Dataset, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            data.schema()
                .feature_index(n)
                .ok_or_else(|| Error::MissingColumn { column: n.clone() })
        })
        .collect()
}

/// Standardizes each client's named features with statistics pooled from
/// per-client aggregates.
pub fn federated_standardize(
    clients: &[Dataset],
    continuous: &[String],
) -> Result<(StandardizationParams, Vec<Dataset>)> {
    if clients.is_empty() {
        return Err(Error::Empty("no clients to standardize".into()));
    }
    let moments = clients
        .iter()
        .map(|c| feature_indices(c, continuous).map(|idx| ClientMoments::compute(c, &idx)))
        .collect::<Result<Vec<_>>>()?;
    let params = StandardizationParams::from_moments(continuous, &moments)?;
    let out = clients.iter().map(|c| params.apply(c)).collect::<Result<_>>()?;
    Ok((params, out))
}

/// Single-site standardization, equal to the one-client federated case.
pub fn standardize(data: &Dataset, continuous: &[String]) -> Result<(StandardizationParams, Dataset)> {
    let (p, mut out) = federated_standardize(std::slice::from_ref(data), continuous)?;
    Ok((p, out.pop().expect("one client in, one out")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    /// Each category prefers one home client; `skew` is the probability a
    /// row goes to its home client, otherwise the client is uniform.
    CategoricalSkew,
    /// Contiguous bands of the sorted numeric attribute, after which a
    /// `1 - skew` fraction of rows trade places at random.
    QuantileBands,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub attribute: String,
    pub strategy: PartitionStrategy,
    pub clients: usize,
    pub skew: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::InvalidConfig("partition needs at least 2 clients".into()));
        }
        if !(self.skew > 0.0 && self.skew <= 1.0) {
            return Err(Error::InvalidConfig(format!("skew {} not in (0, 1]", self.skew)));
        }
        Ok(())
    }
}

/// Splits a dataset into `spec.clients` disjoint sites. Rows keep their
/// input order within each site.
pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    spec.validate()?;
    let k = spec.clients;
    let n = data.len();
    if k > n {
        return Err(Error::InvalidConfig(format!("{k} clients but only {n} rows")));
    }
    let values: Vec<&str> = data
        .rows()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.aux.get(&spec.attribute).map(String::as_str).ok_or_else(|| Error::BadAttribute {
                attribute: spec.attribute.clone(),
                row: i,
            })
        })
        .collect::<Result<_>>()?;
    let mut rng = seed::stream(spec.seed, &[seed::TAG_PARTITION]);

    let assignment: Vec<usize> = match spec.strategy {
        PartitionStrategy::CategoricalSkew => {
            let cats: BTreeSet<&str> = values.iter().copied().collect();
            let home: BTreeMap<&str, usize> = cats.into_iter().enumerate().map(|(i, c)| (c, i % k)).collect();
            values
                .iter()
                .map(|v| {
                    let u: f64 = rng.random();
                    if u < spec.skew {
                        home[v]
                    } else {
                        rng.random_range(0..k)
                    }
                })
                .collect()
        }
        PartitionStrategy::QuantileBands => {
            let nums: Vec<f64> = values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                        Error::BadAttribute {
                            attribute: spec.attribute.clone(),
                            row: i,
                        }
                    })
                })
                .collect::<Result<_>>()?;
            let mut order: Vec<usize> = (0..n).collect();
            // stable: ties keep input order
            order.sort_by(|&a, &b| nums[a].total_cmp(&nums[b]));
            let mut assignment = vec![0; n];
            let (base, extra) = (n / k, n % k);
            let mut pos = 0;
            for band in 0..k {
                let size = base + usize::from(band < extra);
                for &i in &order[pos..pos + size] {
                    assignment[i] = band;
                }
                pos += size;
            }
            let swaps = ((1.0 - spec.skew) * n as f64).round() as usize;
            if swaps > 1 {
                let chosen = rand::seq::index::sample(&mut rng, n, swaps).into_vec();
                let mut targets: Vec<usize> = chosen.iter().map(|&i| assignment[i]).collect();
                targets.shuffle(&mut rng);
                for (&i, t) in chosen.iter().zip(targets) {
                    assignment[i] = t;
                }
            }
            assignment
        }
    };

    let mut buckets = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        buckets[c].push(i);
    }
    if let Some(empty) = buckets.iter().position(Vec::is_empty) {
        return Err(Error::InvalidConfig(format!(
            "partition left client {empty} empty; lower the skew or use fewer clients"
        )));
    }
    Ok(buckets.iter().map(|idx| data.subset(idx)).collect())
}

/// Shuffled train/test split; `round(fraction * n)` rows go to training.
/// Both sides keep input order.
pub fn split(data: &Dataset, train_fraction: f64, seed_value: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let n = data.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n < 2 || n_train == 0 || n_train == n {
        return Err(Error::InvalidConfig(format!(
            "split of {n} rows at {train_fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(seed_value, &[seed::TAG_SPLIT]));
    let (mut tr, mut te) = (idx[..n_train].to_vec(), idx[n_train..].to_vec());
    tr.sort_unstable();
    te.sort_unstable();
    Ok((data.subset(&tr), data.subset(&te)))
}

/// Region labels and their sampling weights in the synthetic generator.
pub const SYNTH_REGIONS: [(&str, f64); 4] = [("R1", 0.20), ("R2", 0.22), ("R3", 0.25), ("R4", 0.33)];
const SYNTH_REGION_SHIFT: [f64; 4] = [0.35, 0.15, -0.05, -0.30];
const SYNTH_INTERCEPT: f64 = -1.2;
const SYNTH_PROXY_SHIFT: f64 = 1.5;
const SYNTH_LATENT_EFFECT: f64 = 0.5;
const SYNTH_ETHNICITIES: [&str; 4] = ["E1", "E2", "E3", "E4"];

/// Draws a synthetic cohort.
///
/// Generative law, per row:
/// - `region` ~ Categorical(R1..R4 with weights 0.20/0.22/0.25/0.33);
/// - `group` ~ Bernoulli(0.5);
/// - `z0` ~ N(0, 1) is a latent risk factor observed through the shifted
///   measurement `x0 = z0 + 1.5 * group`;
/// - `x1` ~ N(shift(region), 1) and `x_j` ~ N(0, 1) for `j >= 2`;
/// - `outcome` ~ Bernoulli(sigmoid(-1.2 + 0.5 z0 + sum_{j>=1} (1.5 / j) x_j + bias * group)).
///
/// Auxiliary attributes: `region`, `age` (`round(64 + 16 * x1)`, years) and
/// `ethnicity` (E1..E4, uniform, independent of everything else). With
/// `bias = 0` the outcome is independent of the group, while a model fitted
/// on `x0` still scores group 1 higher.
pub fn generate_synthetic(n: usize, d: usize, bias: f64, seed_value: u64) -> Result<Dataset> {
    if n < 10 || d < 1 {
        return Err(Error::InvalidConfig(format!("synthetic data needs n >= 10 and d >= 1 (got n={n}, d={d})")));
    }
    let mut rng = seed::stream(seed_value, &[seed::TAG_SYNTH]);
    let total: f64 = SYNTH_REGIONS.iter().map(|r| r.1).sum();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let mut region = SYNTH_REGIONS.len() - 1;
        let mut acc = 0.0;
        for (i, r) in SYNTH_REGIONS.iter().enumerate() {
            acc += r.1;
            if u < acc {
                region = i;
                break;
            }
        }
        let mut x = Vec::with_capacity(d);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push(if j == 1 { z + SYNTH_REGION_SHIFT[region] } else { z });
        }
        let group = u8::from(rng.random::<f64>() < 0.5);
        let z0 = x[0];
        x[0] = z0 + SYNTH_PROXY_SHIFT * f64::from(group);
        let logit = SYNTH_INTERCEPT
            + SYNTH_LATENT_EFFECT * z0
            + x.iter().enumerate().skip(1).map(|(j, v)| 1.5 / j as f64 * v).sum::<f64>()
            + bias * f64::from(group);
        let outcome = if rng.random::<f64>() < sigmoid(logit) { 1 } else { -1 };
        let ethnicity = SYNTH_ETHNICITIES[rng.random_range(0..SYNTH_ETHNICITIES.len())];
        let age = if d > 1 { (64.0 + 16.0 * x[1]).round() } else { 64.0 };
        rows.push(
            Example::new(x, outcome, group)
                .with_aux("region", SYNTH_REGIONS[region].0)
                .with_aux("age", format!("{age}"))
                .with_aux("ethnicity", ethnicity),
        );
    }
    let schema = Schema {
        features: (0..d).map(|j| FeatureSpec::continuous(format!("x{j}"))).collect(),
        outcome_column: "outcome".into(),
        group_column: "group".into(),
        group_levels: ["0".into(), "1".into()],
        aux: vec!["region".into(), "age".into(), "ethnicity".into()],
    };
    Dataset::new(schema, rows)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One site's training and test rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// One manifest line per partitioned site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub client: usize,
    pub file: String,
    pub n: usize,
    pub group0: usize,
    pub group1: usize,
    pub prevalence: f64,
}

/// Writes `client_<k>.csv` per site plus `manifest.csv`.
pub fn write_partition(dir: &Path, clients: &[Dataset]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clients.len());
    for (k, c) in clients.iter().enumerate() {
        let file = format!("client_{}.csv", k + 1);
        c.write_csv(&dir.join(&file))?;
        let [g0, g1] = c.group_counts();
        entries.push(ManifestEntry {
            client: k + 1,
            file,
            n: c.len(),
            group0: g0,
            group1: g1,
            prevalence: c.prevalence(),
        });
    }
    let path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for e in &entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roles() -> ColumnRoles {
        ColumnRoles {
            features: vec![FeatureSpec::continuous("age"), FeatureSpec::binary("witness")],
            outcome: "y".into(),
            group: "sex".into(),
            group_levels: None,
            aux: vec!["race".into()],
        }
    }

    fn one_feature(values: &[f64]) -> Dataset {
        Dataset::from_rows(values.iter().map(|&v| Example::new(vec![v], 1, 0)).collect()).unwrap()
    }

    #[test]
    fn csv_maps_outcomes_and_groups() {
        let text = "age,witness,y,sex,race\n60,1,0,F,W\n70,0,1,M,B\n55,1,1,F,W\n81,0,0,M,A\n";
        let ds = read_csv(text.as_bytes(), &roles()).unwrap();
        assert_eq!(ds.len(), 4);
        let outcomes: Vec<i8> = ds.rows().iter().map(|r| r.outcome).collect();
        assert_eq!(outcomes, vec![-1, 1, 1, -1]);
        let groups: Vec<u8> = ds.rows().iter().map(|r| r.group).collect();
        assert_eq!(groups, vec![0, 1, 0, 1]);
        assert_eq!(ds.rows()[3].aux["race"], "A");
        assert_eq!(ds.rows()[1].features, vec![70.0, 0.0]);
    }

    #[test]
    fn csv_declared_levels_control_mapping() {
        let mut r = roles();
        r.group_levels = Some(["M".into(), "F".into()]);
        let text = "age,witness,y,sex,race\n60,1,0,F,W\n70,0,1,M,B\n";
        let ds = read_csv(text.as_bytes(), &r).unwrap();
        assert_eq!(ds.rows()[0].group, 1);
        assert_eq!(ds.rows()[1].group, 0);
    }

    #[test]
    fn csv_rejects_three_groups() {
        let text = "age,witness,y,sex,race\n60,1,0,F,W\n70,0,1,M,B\n55,1,1,X,W\n";
        let err = read_csv(text.as_bytes(), &roles()).unwrap_err();
        assert!(matches!(err, Error::NonBinaryGroup { .. }));
        assert!(err.to_string().contains("non-binary sensitive column"));
    }

    #[test]
    fn csv_names_the_bad_cell() {
        let text = "age,witness,y,sex,race\n60,1,0,F,W\nNA,0,1,M,B\n";
        match read_csv(text.as_bytes(), &roles()).unwrap_err() {
            Error::NonNumeric { line, column, value } => {
                assert_eq!(line, 3);
                assert_eq!(column, "age");
                assert_eq!(value, "NA");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_missing_column_and_empty_file() {
        let text = "age,y,sex,race\n60,0,F,W\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &roles()).unwrap_err(),
            Error::MissingColumn { column } if column == "witness"
        ));
        let text = "age,witness,y,sex,race\n";
        assert!(matches!(read_csv(text.as_bytes(), &roles()).unwrap_err(), Error::Empty(_)));
    }

    #[test]
    fn csv_round_trip_through_writer() {
        let ds = generate_synthetic(30, 3, 1.0, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let back = load_csv(&path, &ds.schema().roles()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn standardize_single_client() {
        let (p, out) = standardize(&one_feature(&[1.0, 2.0, 3.0]), &["x0".into()]).unwrap();
        assert_eq!(p.features["x0"], FeatureScale { mean: 2.0, sd: 1.0 });
        let v: Vec<f64> = out.rows().iter().map(|r| r.features[0]).collect();
        assert_eq!(v, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn standardize_pools_across_clients() {
        let names = vec!["x0".to_string()];
        let (p1, _) = standardize(&one_feature(&[1.0, 2.0, 3.0]), &names).unwrap();
        let (p2, out) =
            federated_standardize(&[one_feature(&[1.0, 2.0]), one_feature(&[3.0])], &names).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(out[0].rows()[0].features[0], -1.0);
        assert_eq!(out[0].rows()[1].features[0], 0.0);
        assert_eq!(out[1].rows()[0].features[0], 1.0);
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let err = standardize(&one_feature(&[5.0, 5.0, 5.0]), &["x0".into()]).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { .. }));
    }

    #[test]
    fn standardize_leaves_other_columns() {
        let ds = generate_synthetic(50, 3, 0.5, 1).unwrap();
        let (_, out) = standardize(&ds, &["x1".into()]).unwrap();
        for (a, b) in ds.rows().iter().zip(out.rows()) {
            assert_eq!(a.features[0], b.features[0]);
            assert_eq!(a.features[2], b.features[2]);
            assert_eq!(a.outcome, b.outcome);
        }
    }

    fn aged(n: usize) -> Dataset {
        // ages in scrambled order
        let rows = (0..n)
            .map(|i| {
                let age = (i * 37) % n;
                Example::new(vec![age as f64], 1, (i % 2) as u8).with_aux("age", age.to_string())
            })
            .collect();
        Dataset::from_rows(rows).unwrap()
    }

    #[test]
    fn quantile_bands_exact_quartiles() {
        let ds = aged(100);
        let spec = PartitionSpec {
            attribute: "age".into(),
            strategy: PartitionStrategy::QuantileBands,
            clients: 4,
            skew: 1.0,
            seed: 3,
        };
        let parts = partition(&ds, &spec).unwrap();
        for (b, p) in parts.iter().enumerate() {
            assert_eq!(p.len(), 25);
            for r in p.rows() {
                let age = r.features[0] as usize;
                assert!(age >= 25 * b && age < 25 * (b + 1), "band {b} holds age {age}");
            }
        }
    }

    #[test]
    fn categorical_full_skew_is_one_category_per_client() {
        let rows = (0..40)
            .map(|i| Example::new(vec![i as f64], 1, 0).with_aux("race", ["a", "b", "c", "d"][i % 4]))
            .collect();
        let ds = Dataset::from_rows(rows).unwrap();
        let spec = PartitionSpec {
            attribute: "race".into(),
            strategy: PartitionStrategy::CategoricalSkew,
            clients: 4,
            skew: 1.0,
            seed: 9,
        };
        let parts = partition(&ds, &spec).unwrap();
        for p in &parts {
            assert_eq!(p.len(), 10);
            let cats: BTreeSet<&String> = p.rows().iter().map(|r| &r.aux["race"]).collect();
            assert_eq!(cats.len(), 1);
        }
    }

    #[test]
    fn partition_errors() {
        let ds = aged(3);
        let mut spec = PartitionSpec {
            attribute: "age".into(),
            strategy: PartitionStrategy::QuantileBands,
            clients: 4,
            skew: 1.0,
            seed: 0,
        };
        assert!(partition(&ds, &spec).is_err());
        spec.clients = 2;
        spec.attribute = "nope".into();
        assert!(matches!(partition(&ds, &spec).unwrap_err(), Error::BadAttribute { .. }));
        spec.attribute = "age".into();
        spec.clients = 1;
        assert!(partition(&ds, &spec).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = aged(100);
        let (tr, te) = split(&ds, 0.7, 11).unwrap();
        assert_eq!((tr.len(), te.len()), (70, 30));
        let small = aged(10);
        assert_eq!(split(&small, 0.7, 5).unwrap(), split(&small, 0.7, 5).unwrap());
        assert!(split(&small, 0.01, 5).is_err());
        assert!(split(&small, 1.0, 5).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(
            generate_synthetic(200, 4, 1.0, 42).unwrap(),
            generate_synthetic(200, 4, 1.0, 42).unwrap()
        );
        assert_ne!(
            generate_synthetic(200, 4, 1.0, 42).unwrap(),
            generate_synthetic(200, 4, 1.0, 43).unwrap()
        );
        assert!(generate_synthetic(5, 4, 1.0, 42).is_err());
    }

    fn group_rates(ds: &Dataset) -> [f64; 2] {
        let mut pos = [0.0; 2];
        let mut cnt = [0.0; 2];
        for r in ds.rows() {
            cnt[r.group as usize] += 1.0;
            pos[r.group as usize] += r.outcome01();
        }
        [pos[0] / cnt[0], pos[1] / cnt[1]]
    }

    #[test]
    fn synthetic_bias_controls_group_outcome_gap() {
        let fair = group_rates(&generate_synthetic(20_000, 5, 0.0, 1).unwrap());
        assert!((fair[0] - fair[1]).abs() < 0.02, "{fair:?}");
        let biased = group_rates(&generate_synthetic(20_000, 5, 2.0, 1).unwrap());
        assert!((biased[1] - biased[0]) > 0.10, "{biased:?}");
    }
}
