use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fbi_core::corpus::{load_table_with, save_ground_truth, write_table_csv, LoadOptions, TableFormat};
use fbi_core::distance::{compound_distance, distance_matrix, surject_column, write_distance_matrix_csv};
use fbi_core::open_world::{
    calibrate_from_distances, choose_delegate, detect_variant, identify_family, run_protocol, CalibratedTest,
    ProtocolConfig,
};
use fbi_core::walled_garden::{detect, identify, GreedyOptions, TieMode, Verdict};
use fbi_core::{
    load_model_list, select_inputs, Ensemble, FamilyPartition, PredictionTable, ReplayOracle,
    SelectionStrategy, SimSpec,
};

use crate::{CliError, Command, QueryArgs, TableArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command, seed: Option<u64>) -> Result<()> {
    match command {
        Command::Simulate {
            spec,
            out,
            manifest,
            truth,
        } => simulate(&spec, &out, &manifest, truth, seed),
        Command::IngestCheck { table } => ingest_check(&table),
        Command::DistanceMatrix {
            table,
            query,
            models,
            out,
        } => matrix(&table, &query, models.as_deref(), out.as_deref(), seed.unwrap_or(0)),
        Command::DetectWg {
            table,
            family,
            blackbox,
            rule,
            max_queries,
            random_ties,
            out,
        } => {
            let t = load(&table)?;
            let family = t.model_indices(&load_model_list(&family)?)?;
            let opts = GreedyOptions {
                rule,
                max_queries,
                ties: ties(random_ties, seed),
            };
            let outcome = detect(&t, &family, &mut replay(&t, &blackbox)?, opts)?;
            emit(out.as_deref(), &to_json(&outcome))?;
            match outcome.verdict {
                Verdict::Failure => Err(CliError::Verdict(
                    "detection failed: the remaining candidates agree on every input".into(),
                )),
                _ => Ok(()),
            }
        }
        Command::IdentifyWg {
            table,
            partition,
            blackbox,
            rule,
            max_queries,
            random_ties,
            out,
        } => {
            let t = load(&table)?;
            let p = FamilyPartition::load_csv(&partition, fbi_core::FamilyFlavor::VanillaSpan)?;
            let opts = GreedyOptions {
                rule,
                max_queries,
                ties: ties(random_ties, seed),
            };
            let outcome = identify(&t, &p, &mut replay(&t, &blackbox)?, opts)?;
            emit(out.as_deref(), &to_json(&outcome))?;
            if outcome.is_failure() {
                return Err(CliError::Verdict(
                    "identification failed: no input separates the surviving families".into(),
                ));
            }
            Ok(())
        }
        Command::Calibrate {
            table,
            query,
            family,
            negatives,
            alpha,
            delegate,
            out,
        } => {
            let t = load(&table)?;
            let members = load_model_list(&family)?;
            let fam = t.model_indices(&members)?;
            let anchor = match &query.anchor {
                Some(a) => t.model_idx(a)?,
                None => *fam.first().ok_or_else(|| CliError::Usage("empty family file".into()))?,
            };
            let negatives = match negatives {
                Some(p) => t.model_indices(&load_model_list(&p)?)?,
                None => (0..t.n_models()).filter(|m| !fam.contains(m)).collect(),
            };
            let seed = seed.unwrap_or(0);
            let queries = draw(&t, &query, Some(anchor), seed)?;
            let choice = choose_delegate(&t, &fam, anchor, delegate, &queries)?;
            let delegates = choice
                .delegates
                .iter()
                .map(|&d| surject_column(&t, d, &queries))
                .collect::<fbi_core::Result<Vec<_>>>()?;
            let distances = negatives
                .iter()
                .map(|&m| {
                    compound_distance(&surject_column(&t, m, &queries)?, &delegates)
                })
                .collect::<fbi_core::Result<Vec<_>>>()?;
            let mut test = calibrate_from_distances(&distances, alpha, queries.len())?;
            test.strategy = Some(query.strategy);
            let cal = Calibration {
                test,
                family: members,
                anchor: t.models()[anchor].clone(),
                delegates: choice.delegates.iter().map(|&d| t.models()[d].clone()).collect(),
                seed,
            };
            emit(out.as_deref(), &to_json(&cal))
        }
        Command::DetectOw {
            table,
            calibration,
            blackbox,
            out,
        } => {
            let t = load(&table)?;
            let cal: Calibration = serde_json::from_str(&fs::read_to_string(&calibration)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", calibration.display())))?;
            let anchor = t.model_idx(&cal.anchor)?;
            let query = QueryArgs {
                strategy: cal.test.strategy.unwrap_or(SelectionStrategy::All),
                queries: Some(cal.test.l),
                anchor: Some(cal.anchor.clone()),
            };
            let eval_seed = fbi_core::seed::derive(seed.unwrap_or(cal.seed), "eval", &[]);
            let queries = draw(&t, &query, Some(anchor), eval_seed)?;
            let delegates = cal
                .delegates
                .iter()
                .map(|d| surject_column(&t, t.model_idx(d)?, &queries))
                .collect::<fbi_core::Result<Vec<_>>>()?;
            let b = fbi_core::oracle::observe(&mut replay(&t, &blackbox)?, &t, &queries)?;
            let d = detect_variant(&b, &delegates, &cal.test)?;
            let result = OwDetection {
                decision: if d.positive { "positive" } else { "negative" },
                distance: d.distance,
                delegate_distances: d.delegate_distances,
                tau: cal.test.tau,
                queries: queries.len(),
            };
            emit(out.as_deref(), &to_json(&result))
        }
        Command::IdentifyOw {
            table,
            query,
            partition,
            flavor,
            blackbox,
            alpha,
            delegate,
            calibration_draws,
            tau,
            out,
        } => identify_ow(
            &load(&table)?,
            IdentifyOwArgs {
                query: &query,
                partition: &partition,
                flavor,
                blackbox: &blackbox,
                alpha,
                delegate,
                calibration_draws,
                tau,
            },
            seed.unwrap_or(0),
            out.as_deref(),
        ),
        Command::Protocol { config, out, json } => {
            let mut cfg = ProtocolConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_protocol(&cfg)?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv)?;
            emit_bytes(out.as_deref(), &csv)?;
            if let Some(path) = json {
                fs::write(path, report.to_json())?;
            }
            Ok(())
        }
    }
}

fn simulate(spec: &Path, out: &Path, manifest: &Path, truth: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut spec = SimSpec::load(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ensemble = Ensemble::generate(&spec)?;
    let mut buf = Vec::new();
    write_table_csv(&ensemble.table, &mut buf)?;
    fs::write(out, buf)?;
    ensemble.manifest.save(manifest)?;
    let truth = truth.unwrap_or_else(|| out.with_extension("truth.csv"));
    save_ground_truth(&ensemble.table, &truth)?;
    log::info!(
        "{} models x {} inputs written to {}",
        ensemble.table.n_models(),
        ensemble.table.n_inputs(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TableSummary {
    models: usize,
    inputs: usize,
    k: usize,
    num_classes: u32,
    cells: usize,
    ground_truth: bool,
}

fn ingest_check(args: &TableArgs) -> Result<()> {
    let t = load(args)?;
    let summary = TableSummary {
        models: t.n_models(),
        inputs: t.n_inputs(),
        k: t.k(),
        num_classes: t.num_classes(),
        cells: t.cell_count(),
        ground_truth: t.has_ground_truth(),
    };
    emit(None, &to_json(&summary))
}

fn matrix(args: &TableArgs, query: &QueryArgs, models: Option<&Path>, out: Option<&Path>, seed: u64) -> Result<()> {
    let t = load(args)?;
    let models = match models {
        Some(p) => t.model_indices(&load_model_list(p)?)?,
        None => (0..t.n_models()).collect(),
    };
    let anchor = query.anchor.as_deref().map(|a| t.model_idx(a)).transpose()?;
    let queries = draw(&t, query, anchor, seed)?;
    let m = distance_matrix(&t, &models, &queries)?;
    let ids: Vec<&str> = models.iter().map(|&i| t.models()[i].as_str()).collect();
    let mut buf = Vec::new();
    write_distance_matrix_csv(&mut buf, &ids, &m)?;
    emit_bytes(out, &buf)
}

/// Threshold, delegates and query settings shared by `calibrate` and
/// `detect-ow`.
#[derive(Serialize, Deserialize)]
struct Calibration {
    #[serde(flatten)]
    test: CalibratedTest,
    family: Vec<String>,
    anchor: String,
    delegates: Vec<String>,
    seed: u64,
}

#[derive(Serialize)]
struct OwDetection {
    decision: &'static str,
    distance: f64,
    delegate_distances: Vec<f64>,
    tau: f64,
    queries: usize,
}

struct IdentifyOwArgs<'a> {
    query: &'a QueryArgs,
    partition: &'a Path,
    flavor: fbi_core::FamilyFlavor,
    blackbox: &'a str,
    alpha: f64,
    delegate: fbi_core::DelegateOption,
    calibration_draws: usize,
    tau: Option<f64>,
}

#[derive(Serialize)]
struct OwIdentification {
    #[serde(flatten)]
    verdict: fbi_core::IdentificationVerdict,
    tau: f64,
    queries: usize,
}

fn identify_ow(t: &PredictionTable, a: IdentifyOwArgs, seed: u64, out: Option<&Path>) -> Result<()> {
    if matches!(a.query.strategy, SelectionStrategy::Split5050 | SelectionStrategy::Split3070) {
        return Err(CliError::Usage(
            "identification shares one query list across families; use all or entropy".into(),
        ));
    }
    let partition = FamilyPartition::load_csv(a.partition, a.flavor)?;
    let families = partition.resolve(t)?;
    // Anchor of each family: its first listed member.
    let anchors: Vec<usize> = families.iter().map(|f| f[0]).collect();
    let known_models: Vec<usize> = families.iter().flatten().copied().collect();
    let unknown: Vec<usize> = (0..t.n_models()).filter(|m| !known_models.contains(m)).collect();

    let delegates_on = |q: &[usize]| -> fbi_core::Result<Vec<(String, Vec<fbi_core::SurjectedSequence>)>> {
        families
            .iter()
            .zip(&anchors)
            .zip(partition.families())
            .map(|((f, &anchor), fam)| {
                let choice = choose_delegate(t, f, anchor, a.delegate, q)?;
                let seqs = choice
                    .delegates
                    .iter()
                    .map(|&d| surject_column(t, d, q))
                    .collect::<fbi_core::Result<Vec<_>>>()?;
                Ok((fam.id.clone(), seqs))
            })
            .collect()
    };

    let test = match a.tau {
        Some(tau) => CalibratedTest {
            tau,
            alpha: a.alpha,
            l: a.query.queries.unwrap_or(t.n_inputs()),
            strategy: Some(a.query.strategy),
            negatives_used: 0,
            calibration_fpr: f64::NAN,
        },
        None => {
            if unknown.is_empty() {
                return Err(CliError::Usage(
                    "every table model is in a known family; pass --tau or leave some models out of the partition"
                        .into(),
                ));
            }
            let mut negatives = Vec::new();
            for d in 0..a.calibration_draws {
                let q = draw(t, a.query, None, fbi_core::seed::derive(seed, "calibrate", &[d as u64]))?;
                let fams = delegates_on(&q)?;
                for &m in &unknown {
                    let b = surject_column(t, m, &q)?;
                    let mut best = 1.0f64;
                    for (_, ds) in &fams {
                        best = best.min(compound_distance(&b, ds)?);
                    }
                    negatives.push(best);
                }
            }
            let mut test = calibrate_from_distances(&negatives, a.alpha, a.query.queries.unwrap_or(t.n_inputs()))?;
            test.strategy = Some(a.query.strategy);
            test
        }
    };

    let q = draw(t, a.query, None, fbi_core::seed::derive(seed, "eval", &[]))?;
    let fams = delegates_on(&q)?;
    let b = fbi_core::oracle::observe(&mut replay(t, a.blackbox)?, t, &q)?;
    let verdict = identify_family(&b, &fams, &test)?;
    emit(
        out,
        &to_json(&OwIdentification {
            verdict,
            tau: test.tau,
            queries: q.len(),
        }),
    )
}

fn load(args: &TableArgs) -> Result<PredictionTable> {
    let opts = LoadOptions {
        num_classes: args.classes,
        ground_truth: args.truth.clone(),
    };
    let t = load_table_with(&args.table, TableFormat::from_path(&args.table), &opts)?;
    Ok(match args.top_k {
        Some(k) => t.truncate(k)?,
        None => t,
    })
}

/// Query list for `query`; every input in table order when no budget is set.
fn draw(t: &PredictionTable, query: &QueryArgs, anchor: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let anchor = match (&query.anchor, anchor) {
        (_, Some(a)) => Some(a),
        (Some(id), None) => Some(t.model_idx(id)?),
        (None, None) => None,
    };
    let all: Vec<usize> = (0..t.n_models()).collect();
    match query.queries {
        None if query.strategy == SelectionStrategy::All => Ok((0..t.n_inputs()).collect()),
        l => Ok(select_inputs(
            t,
            query.strategy,
            l.unwrap_or(t.n_inputs()),
            anchor,
            Some(&all),
            seed,
        )?
        .inputs),
    }
}

fn replay<'a>(t: &'a PredictionTable, spec: &str) -> Result<ReplayOracle<'a>> {
    match spec.split_once(':') {
        Some(("replay", model)) => Ok(ReplayOracle::by_id(t, model)?),
        _ => Err(CliError::Usage(format!("unsupported black-box `{spec}` (expected replay:MODEL)"))),
    }
}

fn ties(random: bool, seed: Option<u64>) -> TieMode {
    if random {
        TieMode::Random(seed.unwrap_or(0))
    } else {
        TieMode::SmallestInput
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    emit_bytes(out, text.as_bytes())
}

fn emit_bytes(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}
