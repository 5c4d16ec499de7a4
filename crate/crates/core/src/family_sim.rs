//! Synthetic model families.
//!
//! A vanilla model is a top-k classifier with a target top-1 accuracy. A
//! variant is defined by a channel W(z|y) on surjected symbols: for every
//! input the parent's symbol y is pushed through W and the parent's top-k
//! list is minimally rewritten so that the reference class sits at the drawn
//! rank z.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassLabel, Family, FamilyFlavor, FamilyPartition, PredictionTable, TableParts};
use crate::distance::surject;
use crate::error::{Error, Result};
use crate::seed;

/// What happens when a vanilla model misses at rank 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissProfile {
    /// The ground truth is absent from the top-k list.
    #[default]
    Absent,
    /// The ground truth sits at a uniform rank in 2..=k (absent when k = 1).
    Demoted,
    /// Demoted with the given probability, absent otherwise.
    Mixed(f64),
}

impl FromStr for MissProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absent" => Ok(Self::Absent),
            "demoted" => Ok(Self::Demoted),
            _ => match s.strip_prefix("mixed:").map(str::parse::<f64>) {
                Some(Ok(q)) if (0.0..=1.0).contains(&q) => Ok(Self::Mixed(q)),
                _ => Err(Error::Config(format!(
                    "unknown miss profile `{s}` (expected absent, demoted or mixed:<prob>)"
                ))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaSpec {
    pub id: String,
    pub num_classes: u32,
    pub accuracy: f64,
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub miss: MissProfile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    Identity,
    /// Keep the parent symbol, else resample from the parent's marginal.
    RetainMarginal,
    /// Keep the parent symbol, else resample uniformly over S_k.
    RetainUniform,
    /// Keep the parent symbol, else push the reference class out (symbol 0).
    Drop,
    /// Keep the parent symbol, else demote the reference class by one rank.
    Demote,
    Custom,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::RetainMarginal => "retain-marginal",
            Self::RetainUniform => "retain-uniform",
            Self::Drop => "drop",
            Self::Demote => "demote",
            Self::Custom => "custom",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "retain" | "retain-marginal" => Ok(Self::RetainMarginal),
            "retain-uniform" => Ok(Self::RetainUniform),
            "drop" => Ok(Self::Drop),
            "demote" => Ok(Self::Demote),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown channel kind `{other}`"))),
        }
    }
}

/// Row-stochastic W over S_k, stored as W = p·I + (1-p)·Q.
///
/// Sampling draws z = y when u < p and z = Q^{-1}(v | y) otherwise, so two
/// channels driven by the same (u, v) are nested in p.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    kind: ChannelKind,
    retain: f64,
    residual: Vec<Vec<f64>>,
}

const ROW_TOLERANCE: f64 = 1e-12;

fn check_retain(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("retain probability {p} outside [0, 1]")))
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<()> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Config("a channel needs at least two symbols".into()));
    }
    for (y, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Config(format!("channel row {y} has {} entries, expected {n}", row.len())));
        }
        if row.iter().any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::Config(format!("channel row {y} has a negative or NaN entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::Config(format!("channel row {y} sums to {sum}")));
        }
    }
    Ok(())
}

impl ChannelSpec {
    fn build(kind: ChannelKind, retain: f64, residual: Vec<Vec<f64>>) -> Result<Self> {
        check_retain(retain)?;
        check_rows(&residual)?;
        Ok(Self { kind, retain, residual })
    }

    pub fn identity(k: usize) -> Result<Self> {
        Self::build(ChannelKind::Identity, 1.0, Self::unit_rows(k, |y| y))
    }

    /// Resampling law is `marginal`, a distribution over S_k.
    pub fn retain_marginal(p: f64, marginal: &[f64]) -> Result<Self> {
        Self::build(ChannelKind::RetainMarginal, p, vec![marginal.to_vec(); marginal.len()])
    }

    pub fn retain_uniform(p: f64, k: usize) -> Result<Self> {
        let n = k + 1;
        Self::build(ChannelKind::RetainUniform, p, vec![vec![1.0 / n as f64; n]; n])
    }

    pub fn drop(p: f64, k: usize) -> Result<Self> {
        Self::build(ChannelKind::Drop, p, Self::unit_rows(k, |_| 0))
    }

    pub fn demote(p: f64, k: usize) -> Result<Self> {
        Self::build(ChannelKind::Demote, p, Self::unit_rows(k, |y| if y == 0 || y == k { 0 } else { y + 1 }))
    }

    /// Arbitrary W, given as `rows[y][z] = W(z|y)`.
    pub fn from_matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::build(ChannelKind::Custom, 0.0, rows)
    }

    /// Builds a channel of `kind` on S_k; `marginal` is only read for
    /// `RetainMarginal`.
    pub fn of_kind(kind: ChannelKind, p: f64, k: usize, marginal: &[f64]) -> Result<Self> {
        match kind {
            ChannelKind::Identity => Self::identity(k),
            ChannelKind::RetainMarginal => Self::retain_marginal(p, marginal),
            ChannelKind::RetainUniform => Self::retain_uniform(p, k),
            ChannelKind::Drop => Self::drop(p, k),
            ChannelKind::Demote => Self::demote(p, k),
            ChannelKind::Custom => Err(Error::Config("custom channels need an explicit matrix".into())),
        }
    }

    fn unit_rows(k: usize, target: impl Fn(usize) -> usize) -> Vec<Vec<f64>> {
        (0..=k)
            .map(|y| {
                let mut row = vec![0.0; k + 1];
                row[target(y)] = 1.0;
                row
            })
            .collect()
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn retain(&self) -> f64 {
        self.retain
    }

    /// Rank depth k of the symbol set S_k.
    pub fn k(&self) -> usize {
        self.residual.len() - 1
    }

    /// W(·|y).
    pub fn row(&self, y: usize) -> Vec<f64> {
        let mut row: Vec<f64> = self.residual[y].iter().map(|&q| (1.0 - self.retain) * q).collect();
        row[y] += self.retain;
        row
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        (0..self.residual.len()).map(|y| self.row(y)).collect()
    }

    /// p_z(z) = Σ_y p_y(y) W(z|y).
    pub fn output_distribution(&self, p_y: &[f64]) -> Vec<f64> {
        let mut p_z = vec![0.0; self.residual.len()];
        for (y, &py) in p_y.iter().enumerate() {
            for (z, w) in self.row(y).into_iter().enumerate() {
                p_z[z] += py * w;
            }
        }
        p_z
    }

    /// Draws z given y from the two uniforms u (retain) and v (resample).
    pub fn sample(&self, y: usize, u: f64, v: f64) -> usize {
        if u < self.retain {
            return y;
        }
        let row = &self.residual[y];
        let mut acc = 0.0;
        for (z, &q) in row.iter().enumerate() {
            acc += q;
            if v < acc {
                return z;
            }
        }
        // v landed in the rounding gap above the last cumulative sum.
        row.iter().rposition(|&q| q > 0.0).unwrap_or(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub id: String,
    pub parent: String,
    pub channel: ChannelSpec,
    /// Variants sharing a seed share their channel noise and padding draws.
    pub seed: u64,
}

/// Top-1 accuracy of a flat top-k column against per-input ground truth.
pub fn accuracy(column: &[ClassLabel], k: usize, truth: &[ClassLabel]) -> f64 {
    let hits = truth
        .iter()
        .enumerate()
        .filter(|&(x, &t)| column[x * k] == t)
        .count();
    hits as f64 / truth.len() as f64
}

/// Top-1 accuracy of a table model; fails without full ground truth.
pub fn model_accuracy(table: &PredictionTable, model: usize) -> Result<f64> {
    let truth = table.ground_truth_labels()?;
    Ok(accuracy(table.column(model), table.k(), &truth))
}

/// Accuracy gate: acc(v) > (1 - eta) acc(m).
pub fn check_gate(variant: f64, parent: f64, eta: f64) -> Result<()> {
    if variant > (1.0 - eta) * parent {
        Ok(())
    } else {
        Err(Error::AccuracyGateViolation { variant, parent, eta })
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("eta = {eta} outside (0, 1)")))
    }
}

fn push_random_label(rng: &mut impl Rng, list: &mut Vec<ClassLabel>, avoid: ClassLabel, num_classes: u32) {
    loop {
        let l = ClassLabel(rng.random_range(0..num_classes));
        if l != avoid && !list.contains(&l) {
            list.push(l);
            return;
        }
    }
}

/// Flat top-k column of a vanilla model on inputs labelled `truth`.
pub fn gen_vanilla(spec: &VanillaSpec, truth: &[ClassLabel]) -> Result<Vec<ClassLabel>> {
    let k = spec.k;
    let c = spec.num_classes;
    if k == 0 || (c as usize) < k + 1 {
        return Err(Error::Config(format!("need C >= k + 1 (C = {c}, k = {k})")));
    }
    if !(0.0..=1.0).contains(&spec.accuracy) {
        return Err(Error::Config(format!("accuracy {} outside [0, 1]", spec.accuracy)));
    }
    if let Some(t) = truth.iter().find(|t| t.0 >= c) {
        return Err(Error::Config(format!("ground-truth label {t} >= C = {c}")));
    }
    let mut rng = seed::stream(spec.seed, "vanilla", &[]);
    let mut column = Vec::with_capacity(truth.len() * k);
    let mut list = Vec::with_capacity(k);
    for &t in truth {
        list.clear();
        let hit = rng.random::<f64>() < spec.accuracy;
        let rank = if hit {
            Some(0)
        } else {
            let demote = match spec.miss {
                MissProfile::Absent => false,
                MissProfile::Demoted => true,
                MissProfile::Mixed(q) => rng.random::<f64>() < q,
            };
            (demote && k > 1).then(|| rng.random_range(1..k))
        };
        while list.len() < k {
            if Some(list.len()) == rank {
                list.push(t);
            } else {
                push_random_label(&mut rng, &mut list, t, c);
            }
        }
        column.extend_from_slice(&list);
    }
    Ok(column)
}

/// Per-input stream for padding labels of a coupled variant group.
fn padding_rng(seed: u64, input: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(seed, "pad", &[input as u64]))
}

/// Rewrites `parent` (one top-k list) so the reference class lands on
/// surjected symbol `z`.
fn lift(parent: &[ClassLabel], reference: ClassLabel, z: usize, num_classes: u32, rng: &mut impl Rng) -> Vec<ClassLabel> {
    let k = parent.len();
    let y = surject(parent, reference) as usize;
    let mut list = parent.to_vec();
    if z == y {
        return list;
    }
    if y > 0 {
        list.remove(y - 1);
    }
    if z > 0 {
        list.insert(z - 1, reference);
        list.truncate(k);
    }
    while list.len() < k {
        push_random_label(rng, &mut list, reference, num_classes);
    }
    list
}

/// Variant column without the accuracy gate.
pub fn lift_variant(
    parent: &[ClassLabel],
    k: usize,
    num_classes: u32,
    references: &[ClassLabel],
    v: &VariantSpec,
) -> Result<Vec<ClassLabel>> {
    if v.channel.k() != k {
        return Err(Error::Config(format!(
            "channel on S_{} applied to top-{k} outputs",
            v.channel.k()
        )));
    }
    if parent.len() != references.len() * k {
        return Err(Error::LengthMismatch {
            left: parent.len() / k,
            right: references.len(),
        });
    }
    let mut noise = seed::stream(v.seed, "channel", &[]);
    let mut column = Vec::with_capacity(parent.len());
    for (x, &r) in references.iter().enumerate() {
        let cell = &parent[x * k..(x + 1) * k];
        let y = surject(cell, r) as usize;
        let (u, w) = (noise.random::<f64>(), noise.random::<f64>());
        let z = v.channel.sample(y, u, w);
        let mut rng = padding_rng(v.seed, x);
        column.extend(lift(cell, r, z, num_classes, &mut rng));
    }
    Ok(column)
}

/// Variant column; fails when the variant does not pass the accuracy gate
/// against its parent on `truth`.
pub fn gen_variant(
    parent: &[ClassLabel],
    k: usize,
    num_classes: u32,
    truth: &[ClassLabel],
    v: &VariantSpec,
    eta: f64,
) -> Result<Vec<ClassLabel>> {
    check_eta(eta)?;
    let column = lift_variant(parent, k, num_classes, truth, v)?;
    check_gate(accuracy(&column, k, truth), accuracy(parent, k, truth), eta)?;
    Ok(column)
}

/// Surjected symbol distribution of a column.
pub fn surjected_marginal(column: &[ClassLabel], k: usize, references: &[ClassLabel]) -> Vec<f64> {
    let mut counts = vec![0u64; k + 1];
    for (x, &r) in references.iter().enumerate() {
        counts[surject(&column[x * k..(x + 1) * k], r) as usize] += 1;
    }
    let n = references.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// A variation procedure of the ensemble: a channel kind plus the range its
/// retain probability is drawn from. Written `kind:lo:hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ProcedureSpec {
    pub kind: ChannelKind,
    pub lo: f64,
    pub hi: f64,
}

impl FromStr for ProcedureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("procedure `{s}` is not of the form kind:lo:hi"));
        let mut parts = s.split(':');
        let kind: ChannelKind = parts.next().ok_or_else(bad)?.parse()?;
        if kind == ChannelKind::Custom {
            return Err(Error::Config("custom channels cannot be used as ensemble procedures".into()));
        }
        let (lo, hi) = match (parts.next(), parts.next(), parts.next()) {
            (None, None, None) if kind == ChannelKind::Identity => (1.0, 1.0),
            (Some(lo), Some(hi), None) => (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        check_retain(lo)?;
        check_retain(hi)?;
        if lo > hi {
            return Err(Error::Config(format!("procedure `{s}`: empty range")));
        }
        Ok(Self { kind, lo, hi })
    }
}

impl TryFrom<String> for ProcedureSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProcedureSpec> for String {
    fn from(p: ProcedureSpec) -> String {
        p.to_string()
    }
}

impl fmt::Display for ProcedureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind, self.lo, self.hi)
    }
}

fn default_procedures() -> Vec<ProcedureSpec> {
    vec![
        ProcedureSpec { kind: ChannelKind::RetainMarginal, lo: 0.7, hi: 0.95 },
        ProcedureSpec { kind: ChannelKind::Drop, lo: 0.9, hi: 0.99 },
    ]
}

/// Ensemble description, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub seed: u64,
    pub n_vanilla: usize,
    pub variants_per_family: usize,
    pub num_classes: u32,
    pub top_k: usize,
    pub n_inputs: usize,
    pub accuracy_min: f64,
    pub accuracy_max: f64,
    pub eta: f64,
    pub miss_profile: String,
    pub procedures: Vec<ProcedureSpec>,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_vanilla: 10,
            variants_per_family: 5,
            num_classes: 1000,
            top_k: 5,
            n_inputs: 2000,
            accuracy_min: 0.70,
            accuracy_max: 0.85,
            eta: 0.15,
            miss_profile: "absent".into(),
            procedures: default_procedures(),
        }
    }
}

impl SimSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn miss(&self) -> Result<MissProfile> {
        self.miss_profile.parse()
    }

    pub fn validate(&self) -> Result<()> {
        check_eta(self.eta)?;
        self.miss()?;
        if self.n_vanilla == 0 || self.n_inputs == 0 {
            return Err(Error::Config("n_vanilla and n_inputs must be positive".into()));
        }
        if self.top_k == 0 || (self.num_classes as usize) < self.top_k + 1 {
            return Err(Error::Config(format!(
                "need num_classes >= top_k + 1 (num_classes = {}, top_k = {})",
                self.num_classes, self.top_k
            )));
        }
        if !(0.0 < self.accuracy_min && self.accuracy_min <= self.accuracy_max && self.accuracy_max < 1.0) {
            return Err(Error::Config(format!(
                "accuracy range [{}, {}] must lie inside (0, 1)",
                self.accuracy_min, self.accuracy_max
            )));
        }
        if self.variants_per_family > 0 && self.procedures.is_empty() {
            return Err(Error::Config("variants requested but no procedures given".into()));
        }
        if self.n_vanilla > 100 || self.variants_per_family > 1000 {
            return Err(Error::Config("ensemble too large for the model id scheme".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// None for vanilla models.
    pub parent: Option<String>,
    pub procedure: Option<usize>,
    pub kind: String,
    pub parameters: BTreeMap<String, f64>,
    pub accuracy: f64,
}

/// Ground truth of an ensemble: model id -> origin.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub models: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn vanillas(&self) -> Vec<&str> {
        self.models
            .iter()
            .filter(|(_, e)| e.parent.is_none())
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Vanilla at the root of `model`.
    pub fn root<'a>(&'a self, model: &'a str) -> Result<&'a str> {
        let entry = self
            .models
            .get(model)
            .ok_or_else(|| Error::UnknownModel(model.to_string()))?;
        Ok(entry.parent.as_deref().unwrap_or(model))
    }

    /// Families of the given flavor, in id order. Variation families are
    /// `<vanilla>/p<j>`; each vanilla forms its own `<vanilla>/vanilla` family.
    pub fn partition(&self, flavor: FamilyFlavor) -> Result<FamilyPartition> {
        let mut families: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, e) in &self.models {
            let key = match flavor {
                FamilyFlavor::Singleton => id.clone(),
                FamilyFlavor::VanillaSpan => self.root(id)?.to_string(),
                FamilyFlavor::VariationSpan => match (&e.parent, e.procedure) {
                    (Some(p), Some(j)) => format!("{p}/p{j}"),
                    (None, _) => format!("{id}/vanilla"),
                    (Some(_), None) => {
                        return Err(Error::Consistency(format!("variant `{id}` has no procedure")));
                    }
                },
            };
            families.entry(key).or_default().push(id.clone());
        }
        FamilyPartition::new(
            flavor,
            families
                .into_iter()
                .map(|(id, members)| Family { id, members })
                .collect(),
        )
    }
}

/// A generated ensemble: the prediction table plus everything needed to
/// make further members of its families.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub spec: SimSpec,
    pub table: PredictionTable,
    pub manifest: Manifest,
}

pub fn vanilla_id(i: usize) -> String {
    format!("m{i:02}")
}

pub fn variant_id(i: usize, procedure: usize, j: usize) -> String {
    format!("m{i:02}-p{procedure}-v{j}")
}

struct FamilyColumns {
    models: Vec<(String, ManifestEntry, Vec<ClassLabel>)>,
}

impl Ensemble {
    pub fn generate(spec: &SimSpec) -> Result<Self> {
        spec.validate()?;
        let miss = spec.miss()?;
        let truth: Vec<ClassLabel> = {
            let mut rng = seed::stream(spec.seed, "truth", &[]);
            (0..spec.n_inputs)
                .map(|_| ClassLabel(rng.random_range(0..spec.num_classes)))
                .collect()
        };
        let families = (0..spec.n_vanilla)
            .into_par_iter()
            .map(|i| Self::family(spec, miss, i, &truth))
            .collect::<Result<Vec<_>>>()?;

        let mut manifest = Manifest::default();
        let mut models = Vec::new();
        let mut columns = Vec::new();
        for fam in families {
            for (id, entry, column) in fam.models {
                manifest.models.insert(id.clone(), entry);
                models.push(id);
                columns.push(column);
            }
        }
        let table = PredictionTable::from_parts(TableParts {
            models,
            inputs: (0..spec.n_inputs).map(|x| format!("x{x:05}")).collect(),
            k: spec.top_k,
            num_classes: spec.num_classes,
            columns,
            ground_truth: truth.into_iter().map(Some).collect(),
        })?;
        Ok(Self {
            spec: spec.clone(),
            table,
            manifest,
        })
    }

    fn family(spec: &SimSpec, miss: MissProfile, i: usize, truth: &[ClassLabel]) -> Result<FamilyColumns> {
        let k = spec.top_k;
        let target = {
            let mut rng = seed::stream(spec.seed, "accuracy", &[i as u64]);
            rng.random_range(spec.accuracy_min..=spec.accuracy_max)
        };
        let vanilla = VanillaSpec {
            id: vanilla_id(i),
            num_classes: spec.num_classes,
            accuracy: target,
            k,
            seed: seed::derive(spec.seed, "vanilla", &[i as u64]),
            miss,
        };
        let parent = gen_vanilla(&vanilla, truth)?;
        let parent_acc = accuracy(&parent, k, truth);
        let marginal = surjected_marginal(&parent, k, truth);
        let mut models = vec![(
            vanilla.id.clone(),
            ManifestEntry {
                parent: None,
                procedure: None,
                kind: "vanilla".into(),
                parameters: BTreeMap::from([("target_accuracy".to_string(), target)]),
                accuracy: parent_acc,
            },
            parent.clone(),
        )];
        for j in 0..spec.variants_per_family {
            let proc_idx = j % spec.procedures.len();
            let proc = &spec.procedures[proc_idx];
            let p = {
                let mut rng = seed::stream(spec.seed, "strength", &[i as u64, j as u64]);
                rng.random_range(proc.lo..=proc.hi)
            };
            let v = VariantSpec {
                id: variant_id(i, proc_idx, j),
                parent: vanilla.id.clone(),
                channel: ChannelSpec::of_kind(proc.kind, p, k, &marginal)?,
                seed: Self::coupling_seed(spec.seed, i, proc_idx),
            };
            match gen_variant(&parent, k, spec.num_classes, truth, &v, spec.eta) {
                Ok(column) => models.push((
                    v.id,
                    ManifestEntry {
                        parent: Some(vanilla.id.clone()),
                        procedure: Some(proc_idx),
                        kind: proc.kind.as_str().into(),
                        parameters: BTreeMap::from([("retain".to_string(), p)]),
                        accuracy: accuracy(&column, k, truth),
                    },
                    column,
                )),
                Err(e @ Error::AccuracyGateViolation { .. }) => {
                    log::warn!("variant {} discarded: {e}", v.id);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(FamilyColumns { models })
    }

    fn coupling_seed(base: u64, vanilla: usize, procedure: usize) -> u64 {
        seed::derive(base, "procedure", &[vanilla as u64, procedure as u64])
    }

    /// Table index of vanilla `i`.
    pub fn vanilla_index(&self, i: usize) -> Result<usize> {
        self.table.model_idx(&vanilla_id(i))
    }

    pub fn vanilla_indices(&self) -> Vec<usize> {
        (0..self.spec.n_vanilla)
            .map(|i| self.vanilla_index(i).expect("vanillas are never discarded"))
            .collect()
    }

    /// A new member of the procedure family (vanilla `i`, procedure `j`)
    /// that is not in the table. It shares the family's channel noise, so
    /// it is correlated with the existing members like they are with each
    /// other. The accuracy gate is enforced.
    pub fn fresh_variant(&self, i: usize, procedure: usize, retain: f64) -> Result<Vec<ClassLabel>> {
        let proc = self
            .spec
            .procedures
            .get(procedure)
            .ok_or_else(|| Error::Config(format!("no procedure {procedure}")))?;
        self.fresh_variant_with(i, procedure, proc.kind, retain, Self::coupling_seed(self.spec.seed, i, procedure))
    }

    /// A variant of vanilla `i` through an arbitrary channel kind, with its
    /// own noise seed.
    pub fn fresh_variant_with(
        &self,
        i: usize,
        procedure: usize,
        kind: ChannelKind,
        retain: f64,
        noise_seed: u64,
    ) -> Result<Vec<ClassLabel>> {
        let m = self.vanilla_index(i)?;
        let k = self.table.k();
        let truth = self.table.ground_truth_labels()?;
        let parent = self.table.column(m);
        let marginal = surjected_marginal(parent, k, &truth);
        let v = VariantSpec {
            id: format!("{}-p{procedure}-fresh", vanilla_id(i)),
            parent: vanilla_id(i),
            channel: ChannelSpec::of_kind(kind, retain, k, &marginal)?,
            seed: noise_seed,
        };
        gen_variant(parent, k, self.table.num_classes(), &truth, &v, self.spec.eta)
    }

    /// A new vanilla model, independent of every table model.
    pub fn fresh_vanilla(&self, accuracy: f64, seed: u64) -> Result<Vec<ClassLabel>> {
        let truth = self.table.ground_truth_labels()?;
        gen_vanilla(
            &VanillaSpec {
                id: "fresh".into(),
                num_classes: self.table.num_classes(),
                accuracy,
                k: self.table.k(),
                seed: seed::derive(seed, "fresh-vanilla", &[]),
                miss: self.spec.miss()?,
            },
            &truth,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(n: usize, c: u32, seed: u64) -> Vec<ClassLabel> {
        let mut rng = seed::stream(seed, "test-truth", &[]);
        (0..n).map(|_| ClassLabel(rng.random_range(0..c))).collect()
    }

    fn vanilla(a: f64, k: usize, seed: u64) -> VanillaSpec {
        VanillaSpec {
            id: "m".into(),
            num_classes: 50,
            accuracy: a,
            k,
            seed,
            miss: MissProfile::Absent,
        }
    }

    #[test]
    fn vanilla_accuracy_matches_target() {
        let t = truth(10_000, 50, 1);
        let col = gen_vanilla(&vanilla(0.8, 3, 2), &t).unwrap();
        assert!((accuracy(&col, 3, &t) - 0.8).abs() <= 0.012);
        let perfect = gen_vanilla(&vanilla(1.0, 1, 2), &t).unwrap();
        assert_eq!(accuracy(&perfect, 1, &t), 1.0);
        for x in 0..t.len() {
            let cell = &col[x * 3..x * 3 + 3];
            assert!(crate::corpus::all_distinct(cell));
            // Absent miss profile: never at ranks 2..k.
            assert!(!cell[1..].contains(&t[x]));
        }
    }

    #[test]
    fn demoted_profile_keeps_truth_in_the_list() {
        let t = truth(2_000, 50, 3);
        let mut spec = vanilla(0.5, 5, 4);
        spec.miss = MissProfile::Demoted;
        let col = gen_vanilla(&spec, &t).unwrap();
        for x in 0..t.len() {
            assert!(col[x * 5..x * 5 + 5].contains(&t[x]));
        }
    }

    #[test]
    fn too_few_classes_rejected() {
        let mut spec = vanilla(0.8, 3, 0);
        spec.num_classes = 3;
        assert!(gen_vanilla(&spec, &[ClassLabel(0)]).is_err());
    }

    #[test]
    fn identity_channel_copies_parent() {
        let t = truth(500, 50, 5);
        let parent = gen_vanilla(&vanilla(0.7, 3, 6), &t).unwrap();
        let v = VariantSpec {
            id: "v".into(),
            parent: "m".into(),
            channel: ChannelSpec::identity(3).unwrap(),
            seed: 9,
        };
        assert_eq!(lift_variant(&parent, 3, 50, &t, &v).unwrap(), parent);
    }

    #[test]
    fn gate_uses_uniform_resampling_arithmetic() {
        let t = truth(10_000, 50, 7);
        let parent = gen_vanilla(&vanilla(0.8, 1, 8), &t).unwrap();
        let v = |channel| VariantSpec {
            id: "v".into(),
            parent: "m".into(),
            channel,
            seed: 10,
        };
        // 0.8·0.8 + 0.2·0.5 = 0.74 > 0.68
        assert!(gen_variant(&parent, 1, 50, &t, &v(ChannelSpec::retain_uniform(0.8, 1).unwrap()), 0.15).is_ok());
        // 0.5·0.8 + 0.5·0.5 = 0.65 < 0.68
        assert!(matches!(
            gen_variant(&parent, 1, 50, &t, &v(ChannelSpec::retain_uniform(0.5, 1).unwrap()), 0.15),
            Err(Error::AccuracyGateViolation { .. })
        ));
        // Resampling from the parent's marginal preserves accuracy.
        let m = surjected_marginal(&parent, 1, &t);
        let col = gen_variant(&parent, 1, 50, &t, &v(ChannelSpec::retain_marginal(0.5, &m).unwrap()), 0.15).unwrap();
        assert!((accuracy(&col, 1, &t) - accuracy(&parent, 1, &t)).abs() < 0.015);
    }

    #[test]
    fn realized_transitions_follow_w() {
        let k = 3;
        let n = 10_000;
        let t = truth(n, 50, 11);
        let mut spec = vanilla(0.25, k, 12);
        spec.miss = MissProfile::Mixed(2.0 / 3.0);
        let parent = gen_vanilla(&spec, &t).unwrap();
        let w = ChannelSpec::from_matrix(vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.2, 0.6, 0.2, 0.0],
            vec![0.0, 0.3, 0.5, 0.2],
            vec![0.25, 0.25, 0.25, 0.25],
        ])
        .unwrap();
        let v = VariantSpec {
            id: "v".into(),
            parent: "m".into(),
            channel: w.clone(),
            seed: 13,
        };
        let col = lift_variant(&parent, k, 50, &t, &v).unwrap();
        let mut counts = vec![vec![0u64; k + 1]; k + 1];
        for x in 0..n {
            let y = surject(&parent[x * k..x * k + k], t[x]) as usize;
            let z = surject(&col[x * k..x * k + k], t[x]) as usize;
            assert!(crate::corpus::all_distinct(&col[x * k..x * k + k]));
            counts[y][z] += 1;
        }
        for y in 0..=k {
            let row_n: u64 = counts[y].iter().sum();
            let p_y = row_n as f64 / n as f64;
            for z in 0..=k {
                let joint = counts[y][z] as f64 / n as f64;
                assert!((joint - p_y * w.row(y)[z]).abs() <= 0.02, "P({y},{z}) = {joint}");
                // Conditional frequency within 4 binomial standard deviations.
                let cond = counts[y][z] as f64 / row_n as f64;
                let wz = w.row(y)[z];
                let sd = (wz * (1.0 - wz) / row_n as f64).sqrt();
                assert!((cond - wz).abs() <= 4.0 * sd + 1e-12, "W({z}|{y}) = {cond}");
            }
        }
    }

    #[test]
    fn coupled_channels_are_nested() {
        let t = truth(3_000, 50, 14);
        let parent = gen_vanilla(&vanilla(0.75, 1, 15), &t).unwrap();
        let m = surjected_marginal(&parent, 1, &t);
        let make = |p| {
            let v = VariantSpec {
                id: "v".into(),
                parent: "m".into(),
                channel: ChannelSpec::retain_marginal(p, &m).unwrap(),
                seed: 16,
            };
            lift_variant(&parent, 1, 50, &t, &v).unwrap()
        };
        let (weak, strong) = (make(0.9), make(0.7));
        for x in 0..t.len() {
            if strong[x] == parent[x] {
                assert_eq!(weak[x], parent[x]);
            }
        }
    }

    #[test]
    fn channel_shapes() {
        let d = ChannelSpec::demote(0.0, 3).unwrap();
        assert_eq!(d.matrix()[1], vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.matrix()[3], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.matrix()[0], vec![1.0, 0.0, 0.0, 0.0]);
        let dr = ChannelSpec::drop(0.9, 1).unwrap();
        assert!((dr.row(1)[0] - 0.1).abs() < 1e-15);
        assert!(ChannelSpec::from_matrix(vec![vec![0.5, 0.4], vec![0.0, 1.0]]).is_err());
        assert!(ChannelSpec::retain_uniform(1.5, 1).is_err());
    }

    #[test]
    fn procedure_syntax() {
        let p: ProcedureSpec = "drop:0.9:0.99".parse().unwrap();
        assert_eq!((p.kind, p.lo, p.hi), (ChannelKind::Drop, 0.9, 0.99));
        assert_eq!(p.to_string().parse::<ProcedureSpec>().unwrap(), p);
        assert!("drop:0.9".parse::<ProcedureSpec>().is_err());
        assert!("drop:0.99:0.9".parse::<ProcedureSpec>().is_err());
        assert!("bogus:0.1:0.2".parse::<ProcedureSpec>().is_err());
    }

    #[test]
    fn spec_rejects_unknown_keys_and_bad_eta() {
        assert!(SimSpec::from_toml("seed = 1\nn_vanilla = 2").is_ok());
        assert!(SimSpec::from_toml("sede = 1").is_err());
        assert!(SimSpec::from_toml("eta = 1.5").is_err());
        let spec = SimSpec::default();
        assert_eq!(SimSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }

    fn small_spec() -> SimSpec {
        SimSpec {
            seed: 3,
            n_vanilla: 3,
            variants_per_family: 4,
            num_classes: 100,
            top_k: 3,
            n_inputs: 400,
            ..SimSpec::default()
        }
    }

    #[test]
    fn ensemble_structure_and_partitions() {
        let e = Ensemble::generate(&small_spec()).unwrap();
        assert_eq!(e.table.n_models(), e.manifest.models.len());
        assert_eq!(e.manifest.vanillas(), vec!["m00", "m01", "m02"]);
        let vanilla = e.manifest.partition(FamilyFlavor::VanillaSpan).unwrap();
        assert_eq!(vanilla.len(), 3);
        assert!(vanilla.covers(&e.table));
        let variation = e.manifest.partition(FamilyFlavor::VariationSpan).unwrap();
        assert!(variation.family("m01/vanilla").is_some());
        assert_eq!(variation.family_of("m00-p1-v1").unwrap().id, "m00/p1");
        let single = e.manifest.partition(FamilyFlavor::Singleton).unwrap();
        assert_eq!(single.len(), e.table.n_models());
        for (id, entry) in &e.manifest.models {
            if let Some(parent) = &entry.parent {
                assert!(entry.accuracy > 0.85 * e.manifest.models[parent].accuracy, "{id}");
            }
        }
    }

    #[test]
    fn ensemble_is_deterministic() {
        let spec = small_spec();
        let (a, b) = (Ensemble::generate(&spec).unwrap(), Ensemble::generate(&spec).unwrap());
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        crate::corpus::write_table_csv(&a.table, &mut sa).unwrap();
        crate::corpus::write_table_csv(&b.table, &mut sb).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.manifest.to_json(), b.manifest.to_json());
    }

    #[test]
    fn fresh_variants_stay_outside_the_table() {
        let e = Ensemble::generate(&small_spec()).unwrap();
        let col = e.fresh_variant(1, 0, 0.83).unwrap();
        assert_eq!(col.len(), e.table.n_inputs() * e.table.k());
        assert!((0..e.table.n_models()).all(|m| e.table.column(m) != col.as_slice()));
        assert!(e.fresh_variant(1, 7, 0.8).is_err());
    }
}
