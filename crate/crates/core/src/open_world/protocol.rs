//! Repeated seeded experiments over an ensemble, reported as a long-format
//! table of metrics.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    calibrate_from_distances, choose_delegate, identify_family, identify_variation, CalibratedTest, Decision,
    DelegateOption,
};
use crate::corpus::{
    entropy_ranking, load_table_with, select_inputs, FamilyFlavor, LoadOptions, PredictionTable, SelectionStrategy,
    TableFormat,
};
use crate::corpus::ClassLabel;
use crate::distance::{surject, surject_column, SurjectedSequence};
use crate::error::{Error, Result};
use crate::family_sim::{Ensemble, Manifest, SimSpec};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Detect,
    Identify,
    IdentifyVariation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Detect => "detect",
            Self::Identify => "identify",
            Self::IdentifyVariation => "identify-variation",
        }
    }
}

fn default_strategies() -> Vec<SelectionStrategy> {
    vec![SelectionStrategy::Entropy]
}
fn default_top_k() -> Vec<usize> {
    vec![1]
}
fn default_queries() -> Vec<usize> {
    vec![20, 50, 100, 500]
}
fn default_trials() -> usize {
    20
}
fn default_alpha() -> f64 {
    0.05
}
fn default_flavor() -> FamilyFlavor {
    FamilyFlavor::VanillaSpan
}
fn default_head() -> usize {
    1000
}
fn default_heldout() -> usize {
    3
}
fn default_draws() -> usize {
    4
}

/// Experiment description. Exactly one model source must be given: `sim`
/// (inline ensemble spec), `spec` (path to one) or `table` + `manifest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub task: Task,
    #[serde(default = "default_flavor")]
    pub family_flavor: FamilyFlavor,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<SelectionStrategy>,
    #[serde(default = "default_top_k")]
    pub top_k: Vec<usize>,
    /// Grid of query budgets L.
    #[serde(default = "default_queries")]
    pub queries: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub delegate: DelegateOption,
    #[serde(default)]
    pub seed: u64,
    /// Entropy selection draws L inputs from this many top-ranked inputs.
    #[serde(default = "default_head")]
    pub entropy_head: usize,
    /// Families hidden from the identifier to produce negatives.
    #[serde(default = "default_heldout")]
    pub heldout_families: usize,
    /// Input draws pooled to calibrate the identification threshold.
    #[serde(default = "default_draws")]
    pub calibration_draws: usize,
    #[serde(default)]
    pub sim: Option<SimSpec>,
    #[serde(default)]
    pub spec: Option<PathBuf>,
    #[serde(default)]
    pub table: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

impl ProtocolConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.spec, &mut cfg.table, &mut cfg.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sources = [self.sim.is_some(), self.spec.is_some(), self.table.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::Config("give exactly one of `sim`, `spec` or `table`".into()));
        }
        if self.table.is_some() != self.manifest.is_some() {
            return Err(Error::Config("`table` and `manifest` go together".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if self.trials == 0 || self.queries.is_empty() || self.top_k.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("trials, queries, top_k and strategies must be non-empty".into()));
        }
        if self.queries.contains(&0) || self.top_k.contains(&0) {
            return Err(Error::Config("query budgets and top-k depths must be positive".into()));
        }
        match self.task {
            Task::Detect if self.family_flavor == FamilyFlavor::Singleton => Err(Error::Config(
                "singleton families leave no member to detect; use vanilla or variation".into(),
            )),
            Task::Identify
                if self
                    .strategies
                    .iter()
                    .any(|s| matches!(s, SelectionStrategy::Split5050 | SelectionStrategy::Split3070)) =>
            {
                Err(Error::Config(
                    "identification shares one query list across families; split strategies need a single anchor"
                        .into(),
                ))
            }
            Task::Identify if self.heldout_families == 0 || self.calibration_draws == 0 => Err(Error::Config(
                "identification needs held-out families and at least one calibration draw".into(),
            )),
            _ => Ok(()),
        }
    }

    /// The table and manifest, plus the generating ensemble for simulated
    /// sources.
    fn source(&self) -> Result<(PredictionTable, Manifest, Option<Ensemble>)> {
        let spec = match (&self.sim, &self.spec) {
            (Some(spec), _) => Some(spec.clone()),
            (None, Some(path)) => Some(SimSpec::load(path)?),
            (None, None) => None,
        };
        if let Some(spec) = spec {
            let e = Ensemble::generate(&spec)?;
            return Ok((e.table.clone(), e.manifest.clone(), Some(e)));
        }
        let (table, manifest) = (self.table.as_ref().expect("validated"), self.manifest.as_ref().expect("validated"));
        let t = load_table_with(table, TableFormat::from_path(table), &LoadOptions::default())?;
        Ok((t, Manifest::load(manifest)?, None))
    }
}

/// One line of the long-format report. `seed` is the trial seed, or `mean`
/// for the average over trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub family_flavor: String,
    pub strategy: String,
    pub top_k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.rows).expect("report serializes");
        s.push('\n');
        s
    }

    /// Mean of `metric` over trials at one grid point.
    pub fn mean(&self, strategy: SelectionStrategy, top_k: usize, l: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy.as_str() && r.top_k == top_k && r.l == l && r.metric == metric && r.seed == "mean")
            .map(|r| r.value)
    }

    /// Per-trial values of `metric` at one grid point, in trial order.
    pub fn trials(&self, strategy: SelectionStrategy, top_k: usize, l: usize, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.strategy == strategy.as_str() && r.top_k == top_k && r.l == l && r.metric == metric && r.seed != "mean")
            .map(|r| r.value)
            .collect()
    }
}

/// Everything a trial needs at one top-k depth.
struct Ctx<'a> {
    cfg: &'a ProtocolConfig,
    table: PredictionTable,
    /// Member indices per family of the configured flavor.
    families: Vec<Vec<usize>>,
    family_ids: Vec<String>,
    /// Index of the vanilla spanning each family.
    anchors: Vec<usize>,
    /// Inputs by decreasing top-1 entropy over the vanilla models.
    entropy_order: Vec<usize>,
    /// Generator of fresh variants when the models are simulated.
    sim: Option<&'a Ensemble>,
}

impl Ctx<'_> {
    /// L inputs for one experiment.
    fn draw(&self, strategy: SelectionStrategy, l: usize, anchor: Option<usize>, seed: u64) -> Result<Vec<usize>> {
        match strategy {
            SelectionStrategy::Entropy => {
                let n = self.entropy_order.len();
                if l > n {
                    return Err(Error::InsufficientPool {
                        stratum: "entropy",
                        requested: l,
                        available: n,
                    });
                }
                let head = self.cfg.entropy_head.max(l).min(n);
                let mut rng = seed::stream(seed, "entropy-head", &[]);
                Ok(index::sample(&mut rng, head, l)
                    .into_iter()
                    .map(|i| self.entropy_order[i])
                    .collect())
            }
            s => Ok(select_inputs(&self.table, s, l, anchor, None, seed)?.inputs),
        }
    }

    fn seqs(&self, models: &[usize], queries: &[usize]) -> Result<Vec<SurjectedSequence>> {
        models.iter().map(|&m| surject_column(&self.table, m, queries)).collect()
    }
}

/// Compound distance with degenerate evidence mapped to 1.
fn distance_to(b: &SurjectedSequence, delegates: &[SurjectedSequence]) -> Result<f64> {
    let mut best = 1.0f64;
    for d in delegates {
        let r = crate::distance::model_distance(b, d)?;
        best = best.min(r.distance);
    }
    Ok(best)
}

type Metrics = Vec<(&'static str, f64)>;
type NamedDelegates = (String, Vec<SurjectedSequence>);

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

fn detect_trial(ctx: &Ctx, strategy: SelectionStrategy, l: usize, trial_seed: u64) -> Result<Metrics> {
    let (mut hits, mut positives, mut false_hits, mut negatives) = (0, 0, 0, 0);
    let mut taus = Vec::new();
    for (fi, fam) in ctx.families.iter().enumerate() {
        if fam.len() < 2 {
            continue;
        }
        let anchor = ctx.anchors[fi];
        let eval_q = ctx.draw(strategy, l, Some(anchor), seed::derive(trial_seed, "eval", &[fi as u64]))?;
        let cal_q = ctx.draw(strategy, l, Some(anchor), seed::derive(trial_seed, "calibrate", &[fi as u64]))?;
        let choice = choose_delegate(&ctx.table, fam, anchor, ctx.cfg.delegate, &eval_q)?;
        let pos: Vec<usize> = fam.iter().copied().filter(|m| !choice.delegates.contains(m)).collect();
        let neg: Vec<usize> = (0..ctx.table.n_models()).filter(|m| !fam.contains(m)).collect();

        let cal_delegates = ctx.seqs(&choice.delegates, &cal_q)?;
        let cal = ctx
            .seqs(&neg, &cal_q)?
            .iter()
            .map(|b| distance_to(b, &cal_delegates))
            .collect::<Result<Vec<_>>>()?;
        let test = calibrate_from_distances(&cal, ctx.cfg.alpha, l)?;
        taus.push(test.tau);

        let delegates = ctx.seqs(&choice.delegates, &eval_q)?;
        for b in ctx.seqs(&pos, &eval_q)? {
            hits += usize::from(test.accepts(distance_to(&b, &delegates)?));
        }
        for b in ctx.seqs(&neg, &eval_q)? {
            false_hits += usize::from(test.accepts(distance_to(&b, &delegates)?));
        }
        positives += pos.len();
        negatives += neg.len();
    }
    if positives == 0 {
        return Err(Error::Config("no family has a member to detect besides its delegates".into()));
    }
    Ok(vec![
        ("tpr", ratio(hits, positives)),
        ("fpr", ratio(false_hits, negatives)),
        ("tau", taus.iter().sum::<f64>() / taus.len() as f64),
    ])
}

fn identify_trial(ctx: &Ctx, strategy: SelectionStrategy, l: usize, trial_seed: u64) -> Result<Metrics> {
    let nf = ctx.families.len();
    let held = ctx.cfg.heldout_families;
    if held + 2 > nf {
        return Err(Error::Config(format!(
            "{nf} families cannot hold out {held} and keep two known ones"
        )));
    }
    let mut rng = seed::stream(trial_seed, "heldout", &[]);
    let heldout = index::sample(&mut rng, nf, held).into_vec();
    let known: Vec<usize> = (0..nf).filter(|f| !heldout.contains(f)).collect();

    // Delegates per known family, chosen on the same query list.
    let delegates_on = |q: &[usize]| -> Result<(Vec<usize>, Vec<NamedDelegates>)> {
        let mut all = Vec::new();
        let mut fams = Vec::new();
        for &f in &known {
            let choice = choose_delegate(&ctx.table, &ctx.families[f], ctx.anchors[f], ctx.cfg.delegate, q)?;
            fams.push((ctx.family_ids[f].clone(), ctx.seqs(&choice.delegates, q)?));
            all.extend(choice.delegates);
        }
        Ok((all, fams))
    };
    let unknown_models: Vec<usize> = heldout.iter().flat_map(|&f| ctx.families[f].iter().copied()).collect();

    let mut negatives = Vec::new();
    for d in 0..ctx.cfg.calibration_draws {
        let q = ctx.draw(strategy, l, None, seed::derive(trial_seed, "calibrate", &[d as u64]))?;
        let (_, fams) = delegates_on(&q)?;
        for b in ctx.seqs(&unknown_models, &q)? {
            let mut best = 1.0f64;
            for (_, delegates) in &fams {
                best = best.min(distance_to(&b, delegates)?);
            }
            negatives.push(best);
        }
    }
    let test: CalibratedTest = calibrate_from_distances(&negatives, ctx.cfg.alpha, l)?;

    let q = ctx.draw(strategy, l, None, seed::derive(trial_seed, "eval", &[]))?;
    let (delegate_models, fams) = delegates_on(&q)?;
    let (mut correct, mut wrong, mut abstain, mut accepted_unknown) = (0, 0, 0, 0);
    let mut positives = 0;
    for (fi, fam) in ctx.families.iter().enumerate() {
        let is_known = known.contains(&fi);
        for &m in fam {
            if delegate_models.contains(&m) {
                continue;
            }
            let b = surject_column(&ctx.table, m, &q)?;
            let decision = match identify_family(&b, &fams, &test) {
                Ok(v) => v.decision,
                Err(Error::DegenerateEvidence) => Decision::Abstain,
                Err(e) => return Err(e),
            };
            match (is_known, decision) {
                (true, Decision::Family(id)) if id == ctx.family_ids[fi] => correct += 1,
                (true, Decision::Family(_)) => wrong += 1,
                (true, Decision::Abstain) => abstain += 1,
                (false, Decision::Family(_)) => accepted_unknown += 1,
                (false, Decision::Abstain) => {}
            }
            positives += usize::from(is_known);
        }
    }
    Ok(vec![
        ("id_correct", ratio(correct, positives)),
        ("id_wrong", ratio(wrong, positives)),
        ("id_abstain", ratio(abstain, positives)),
        ("fpr", ratio(accepted_unknown, unknown_models.len())),
        ("tau", test.tau),
    ])
}

/// The variation families spanned by one vanilla.
struct VariationGroup {
    anchor: usize,
    families: Vec<VariationFamily>,
}

struct VariationFamily {
    id: String,
    procedure: Option<usize>,
    members: Vec<usize>,
}

/// Second-stage identification among the variation families of each
/// vanilla. Simulated black-boxes are fresh variants, one per procedure
/// and trial, matched against every family in full; stored tables fall back
/// to leave-one-out over the family members.
fn identify_variation_trial(
    ctx: &Ctx,
    variation: &[VariationGroup],
    strategy: SelectionStrategy,
    l: usize,
    trial_seed: u64,
) -> Result<Metrics> {
    let (mut correct, mut total) = (0, 0);
    let delegates = |pool: &[usize], anchor: usize, q: &[usize]| -> Result<Vec<SurjectedSequence>> {
        let choice = choose_delegate(&ctx.table, pool, anchor, ctx.cfg.delegate, q)?;
        ctx.seqs(&choice.delegates, q)
    };
    let mut score = |b: &SurjectedSequence, candidates: &[(String, Vec<SurjectedSequence>)], truth: &str| {
        match identify_variation(b, candidates) {
            Ok(found) => correct += usize::from(found == truth),
            Err(Error::DegenerateEvidence) => {}
            Err(e) => return Err(e),
        }
        total += 1;
        Ok(())
    };
    for (vi, group) in variation.iter().enumerate() {
        let fams = &group.families;
        if fams.len() < 2 {
            continue;
        }
        let anchor = group.anchor;
        let q = ctx.draw(strategy, l, Some(anchor), seed::derive(trial_seed, "eval", &[vi as u64]))?;
        if let Some(ens) = ctx.sim {
            let vanilla = ens
                .vanilla_indices()
                .iter()
                .position(|&m| m == anchor)
                .expect("variation groups are spanned by vanillas");
            let candidates = fams
                .iter()
                .map(|f| Ok((f.id.clone(), delegates(&f.members, anchor, &q)?)))
                .collect::<Result<Vec<_>>>()?;
            for f in fams {
                let Some(j) = f.procedure else { continue };
                let proc = &ens.spec.procedures[j];
                let mut rng = seed::stream(trial_seed, "fresh-variant", &[vi as u64, j as u64]);
                let strength = rng.random_range(proc.lo..=proc.hi);
                let column = match ens.fresh_variant(vanilla, j, strength) {
                    Ok(c) => c,
                    Err(Error::AccuracyGateViolation { .. }) => continue,
                    Err(e) => return Err(e),
                };
                score(&fresh_sequence(ctx, &column, ens.table.k(), &q)?, &candidates, &f.id)?;
            }
        } else {
            for (fi, f) in fams.iter().enumerate() {
                for &b in &f.members {
                    let rest: Vec<usize> = f.members.iter().copied().filter(|&m| m != b).collect();
                    if rest.is_empty() {
                        continue;
                    }
                    let candidates = fams
                        .iter()
                        .enumerate()
                        .map(|(gi, g)| {
                            let pool = if gi == fi { &rest } else { &g.members };
                            Ok((g.id.clone(), delegates(pool, anchor, &q)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    score(&surject_column(&ctx.table, b, &q)?, &candidates, &f.id)?;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Config("no vanilla has two variation families with a spare member".into()));
    }
    Ok(vec![("variation_id_rate", ratio(correct, total))])
}

/// Surjected outputs of a generated column (rank depth `depth`) truncated to
/// the context's depth.
fn fresh_sequence(ctx: &Ctx, column: &[ClassLabel], depth: usize, q: &[usize]) -> Result<SurjectedSequence> {
    let k = ctx.table.k();
    SurjectedSequence::new(
        q.iter()
            .map(|&x| surject(&column[x * depth..x * depth + k], ctx.table.reference(x)))
            .collect(),
        k,
    )
}

/// Runs every (strategy, top-k, L) grid point for `cfg.trials` seeded trials.
/// Trial t uses seed `cfg.seed + t`; the report is independent of the
/// number of worker threads.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<Report> {
    cfg.validate()?;
    let (full, manifest, sim) = cfg.source()?;
    if !full.has_ground_truth() {
        log::info!("table has no ground truth; reference classes come from the majority vote");
    }
    let flavor = match cfg.task {
        Task::IdentifyVariation => FamilyFlavor::VanillaSpan,
        _ => cfg.family_flavor,
    };
    let mut rows = Vec::new();
    for &k in &cfg.top_k {
        let table = full.truncate(k)?;
        let partition = manifest.partition(flavor)?;
        let families = partition.resolve(&table)?;
        let family_ids: Vec<String> = partition.families().iter().map(|f| f.id.clone()).collect();
        let anchors = partition
            .families()
            .iter()
            .map(|f| table.model_idx(manifest.root(&f.members[0])?))
            .collect::<Result<Vec<_>>>()?;
        let vanillas = table.model_indices(&manifest.vanillas().iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        let entropy_order = entropy_ranking(&table, &vanillas).into_iter().map(|(x, _)| x).collect();

        let variation = if cfg.task == Task::IdentifyVariation {
            let vp = manifest.partition(FamilyFlavor::VariationSpan)?;
            let mut per_vanilla: Vec<VariationGroup> = Vec::new();
            for (f, members) in vp.families().iter().zip(vp.resolve(&table)?) {
                let root = table.model_idx(manifest.root(&f.members[0])?)?;
                if members.contains(&root) {
                    continue;
                }
                let family = VariationFamily {
                    id: f.id.clone(),
                    procedure: manifest.models[&f.members[0]].procedure,
                    members,
                };
                match per_vanilla.iter_mut().find(|g| g.anchor == root) {
                    Some(g) => g.families.push(family),
                    None => per_vanilla.push(VariationGroup {
                        anchor: root,
                        families: vec![family],
                    }),
                }
            }
            per_vanilla
        } else {
            Vec::new()
        };

        let ctx = Ctx {
            cfg,
            table,
            families,
            family_ids,
            anchors,
            entropy_order,
            sim: sim.as_ref(),
        };
        for &strategy in &cfg.strategies {
            for &l in &cfg.queries {
                let trials = (0..cfg.trials)
                    .into_par_iter()
                    .map(|t| {
                        let trial_seed = cfg.seed.wrapping_add(t as u64);
                        let grid_seed = seed::derive(trial_seed, strategy.as_str(), &[k as u64, l as u64]);
                        let metrics = match cfg.task {
                            Task::Detect => detect_trial(&ctx, strategy, l, grid_seed),
                            Task::Identify => identify_trial(&ctx, strategy, l, grid_seed),
                            Task::IdentifyVariation => identify_variation_trial(&ctx, &variation, strategy, l, grid_seed),
                        }?;
                        Ok((trial_seed, metrics))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let row = |seed: String, metric: &str, value: f64| ReportRow {
                    task: cfg.task.as_str().into(),
                    family_flavor: flavor.as_str().into(),
                    strategy: strategy.as_str().into(),
                    top_k: k,
                    l,
                    seed,
                    metric: metric.into(),
                    value,
                };
                for (trial_seed, metrics) in &trials {
                    for &(metric, value) in metrics {
                        rows.push(row(trial_seed.to_string(), metric, value));
                    }
                }
                for (i, &(metric, _)) in trials[0].1.iter().enumerate() {
                    let values: Vec<f64> = trials.iter().map(|t| t.1[i].1).filter(|v| !v.is_nan()).collect();
                    let mean = if values.is_empty() {
                        f64::NAN
                    } else {
                        values.iter().sum::<f64>() / values.len() as f64
                    };
                    rows.push(row("mean".into(), metric, mean));
                }
            }
        }
    }
    Ok(Report { rows })
}
