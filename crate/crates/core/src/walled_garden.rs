//! Greedy detection and identification when the black-box is known to be
//! one of the table models.
//!
//! Every step scores each unqueried input by how many candidates it is
//! expected to leave alive (or leaves alive in the worst case), queries the
//! lowest-scoring one and keeps the candidates whose output matches the
//! black-box answer exactly.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassLabel, FamilyPartition, PredictionTable};
use crate::error::{Error, Result};
use crate::oracle::BlackBox;
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreRule {
    /// Expected number of surviving candidates.
    #[default]
    Expectation,
    /// Largest number of surviving candidates over possible answers.
    WorstCase,
}

impl ScoreRule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Expectation => "expectation",
            Self::WorstCase => "worst-case",
        }
    }
}

impl fmt::Display for ScoreRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expectation" | "average" => Ok(Self::Expectation),
            "worst-case" | "worstcase" | "max" => Ok(Self::WorstCase),
            other => Err(Error::Config(format!(
                "unknown score rule `{other}` (expected expectation or worst-case)"
            ))),
        }
    }
}

/// How equal scores are resolved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieMode {
    #[default]
    SmallestInput,
    /// Uniform among the tied inputs, from a stream keyed by this seed and
    /// the step number.
    Random(u64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GreedyOptions {
    pub rule: ScoreRule,
    /// Defaults to the number of inputs.
    pub max_queries: Option<usize>,
    pub ties: TieMode,
}

/// Outputs interned per input: models answering identically on an input get
/// the same code. Built once per table and reused across sessions.
#[derive(Clone, Debug)]
pub struct Codebook<'a> {
    table: &'a PredictionTable,
    /// Input-major: `codes[x * n_models + m]`.
    codes: Vec<u32>,
    lookup: Vec<HashMap<&'a [ClassLabel], u32>>,
}

impl<'a> Codebook<'a> {
    pub fn new(table: &'a PredictionTable) -> Self {
        let nm = table.n_models();
        let mut codes = Vec::with_capacity(nm * table.n_inputs());
        let lookup = (0..table.n_inputs())
            .map(|x| {
                let mut map: HashMap<&[ClassLabel], u32> = HashMap::new();
                for m in 0..nm {
                    let next = map.len() as u32;
                    codes.push(*map.entry(table.output(m, x)).or_insert(next));
                }
                map
            })
            .collect();
        Self { table, codes, lookup }
    }

    pub fn table(&self) -> &'a PredictionTable {
        self.table
    }

    #[inline]
    fn code(&self, x: usize, m: usize) -> u32 {
        self.codes[x * self.table.n_models() + m]
    }

    fn code_of(&self, x: usize, output: &[ClassLabel]) -> Option<u32> {
        self.lookup[x].get(output).copied()
    }
}

/// One query of a session, as written to transcripts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step: usize,
    pub input: String,
    pub output: Vec<ClassLabel>,
    pub score: f64,
    /// Candidate-set sizes after the answer.
    pub remaining_family: usize,
    pub remaining_other: usize,
}

/// Candidates alive after the last query, plus the transcript that
/// produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateState {
    pub step: usize,
    /// F^(l) for detection, the surviving models for identification.
    pub remaining_family: Vec<String>,
    /// (A\F)^(l) for detection, the surviving family ids for identification.
    pub remaining_other: Vec<String>,
    pub queried: Vec<String>,
    pub transcript: Vec<(String, Vec<ClassLabel>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Positive,
    Negative,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub verdict: Verdict,
    pub queries_used: usize,
    pub steps: Vec<Step>,
    pub final_state: CandidateState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationOutcome {
    /// None on failure.
    pub family: Option<String>,
    pub queries_used: usize,
    pub steps: Vec<Step>,
    pub final_state: CandidateState,
}

impl IdentificationOutcome {
    pub fn is_failure(&self) -> bool {
        self.family.is_none()
    }
}

/// Tally of codes on one input: (code, family count, other count).
fn tally(book: &Codebook, x: usize, a: &[usize], b: &[usize], out: &mut Vec<(u32, u32, u32)>) {
    out.clear();
    for (set, slot) in [(a, 0), (b, 1)] {
        for &m in set {
            let c = book.code(x, m);
            match out.iter_mut().find(|e| e.0 == c) {
                Some(e) if slot == 0 => e.1 += 1,
                Some(e) => e.2 += 1,
                None if slot == 0 => out.push((c, 1, 0)),
                None => out.push((c, 0, 1)),
            }
        }
    }
}

/// Picks the minimum over `(score, input)` pairs; `None` when empty.
fn pick(scored: Vec<(u64, usize)>, ties: TieMode, step: usize) -> Option<(u64, usize)> {
    let best = scored.iter().map(|s| s.0).min()?;
    match ties {
        TieMode::SmallestInput => scored.into_iter().filter(|s| s.0 == best).min_by_key(|s| s.1),
        TieMode::Random(seed) => {
            let mut tied: Vec<(u64, usize)> = scored.into_iter().filter(|s| s.0 == best).collect();
            tied.sort_unstable_by_key(|s| s.1);
            let mut rng = seed::stream(seed, "ties", &[step as u64]);
            tied.choose(&mut rng).copied()
        }
    }
}

fn ids(table: &PredictionTable, models: &[usize]) -> Vec<String> {
    models.iter().map(|&m| table.models()[m].clone()).collect()
}

fn input_ids(table: &PredictionTable, inputs: &[usize]) -> Vec<String> {
    inputs.iter().map(|&x| table.inputs()[x].clone()).collect()
}

fn unqueried(n: usize, queried: &[bool]) -> impl ParallelIterator<Item = usize> + '_ {
    (0..n).into_par_iter().with_min_len(64).filter(move |&x| !queried[x])
}

/// Detection session for family `family` (table model indices).
pub fn detect(
    table: &PredictionTable,
    family: &[usize],
    blackbox: &mut dyn BlackBox,
    opts: GreedyOptions,
) -> Result<DetectionOutcome> {
    detect_in(&Codebook::new(table), family, blackbox, opts)
}

pub fn detect_in(
    book: &Codebook,
    family: &[usize],
    blackbox: &mut dyn BlackBox,
    opts: GreedyOptions,
) -> Result<DetectionOutcome> {
    let table = book.table;
    let nm = table.n_models();
    let mut in_family = vec![false; nm];
    for &m in family {
        if m >= nm {
            return Err(Error::UnknownModel(format!("#{m}")));
        }
        in_family[m] = true;
    }
    let mut fam: Vec<usize> = (0..nm).filter(|&m| in_family[m]).collect();
    let mut out: Vec<usize> = (0..nm).filter(|&m| !in_family[m]).collect();
    if fam.is_empty() || out.is_empty() {
        return Err(Error::Config(
            "the family must be a non-empty proper subset of the table models".into(),
        ));
    }

    let n = table.n_inputs();
    let budget = opts.max_queries.unwrap_or(n);
    let mut queried = vec![false; n];
    let mut order = Vec::new();
    let mut transcript = Vec::new();
    let mut steps = Vec::new();

    let verdict = loop {
        match (fam.is_empty(), out.is_empty()) {
            (true, true) => {
                let last = transcript.last().map(|(_, o): &(String, Vec<ClassLabel>)| o.iter().map(|l| l.0).collect());
                return Err(Error::OracleOutputInvalid(last.unwrap_or_default()));
            }
            (false, true) => break Verdict::Positive,
            (true, false) => break Verdict::Negative,
            _ => {}
        }
        let f_len = fam.len() as u64;
        let scored: Vec<(u64, usize)> = unqueried(n, &queried)
            .map_init(Vec::new, |buf, x| {
                tally(book, x, &fam, &out, buf);
                if buf.len() < 2 {
                    // Every candidate answers alike: the input cannot split them.
                    return None;
                }
                let score = match opts.rule {
                    ScoreRule::Expectation => buf.iter().map(|&(_, f, o)| u64::from(f) * u64::from(o)).sum(),
                    ScoreRule::WorstCase => buf.iter().filter(|e| e.1 > 0).map(|e| u64::from(e.2)).max().unwrap_or(0),
                };
                Some((score, x))
            })
            .flatten()
            .collect();
        let Some((score, x)) = pick(scored, opts.ties, order.len()) else {
            break Verdict::Failure;
        };
        if order.len() >= budget {
            return Err(Error::BudgetExhausted {
                queries_used: order.len(),
            });
        }
        let answer = blackbox.query(x)?;
        let code = book.code_of(x, &answer);
        fam.retain(|&m| Some(book.code(x, m)) == code);
        out.retain(|&m| Some(book.code(x, m)) == code);
        queried[x] = true;
        order.push(x);
        steps.push(Step {
            step: order.len(),
            input: table.inputs()[x].clone(),
            output: answer.clone(),
            score: match opts.rule {
                ScoreRule::Expectation => score as f64 / f_len as f64,
                ScoreRule::WorstCase => score as f64,
            },
            remaining_family: fam.len(),
            remaining_other: out.len(),
        });
        transcript.push((table.inputs()[x].clone(), answer));
    };

    Ok(DetectionOutcome {
        verdict,
        queries_used: order.len(),
        steps,
        final_state: CandidateState {
            step: order.len(),
            remaining_family: ids(table, &fam),
            remaining_other: ids(table, &out),
            queried: input_ids(table, &order),
            transcript,
        },
    })
}

/// Identification session over the families of `partition`, which must
/// cover every table model.
pub fn identify(
    table: &PredictionTable,
    partition: &FamilyPartition,
    blackbox: &mut dyn BlackBox,
    opts: GreedyOptions,
) -> Result<IdentificationOutcome> {
    identify_in(&Codebook::new(table), partition, blackbox, opts)
}

pub fn identify_in(
    book: &Codebook,
    partition: &FamilyPartition,
    blackbox: &mut dyn BlackBox,
    opts: GreedyOptions,
) -> Result<IdentificationOutcome> {
    let table = book.table;
    let nm = table.n_models();
    let mut family_of = vec![usize::MAX; nm];
    for (f, members) in partition.resolve(table)?.into_iter().enumerate() {
        for m in members {
            family_of[m] = f;
        }
    }
    if let Some(m) = family_of.iter().position(|&f| f == usize::MAX) {
        return Err(Error::Config(format!(
            "model `{}` belongs to no family of the partition",
            table.models()[m]
        )));
    }
    let n_families = partition.len();
    let mut alive: Vec<usize> = (0..nm).collect();
    let n = table.n_inputs();
    let budget = opts.max_queries.unwrap_or(n);
    let mut queried = vec![false; n];
    let mut order = Vec::new();
    let mut transcript = Vec::new();
    let mut steps = Vec::new();

    let live_families = |alive: &[usize]| {
        let mut live = vec![false; n_families];
        for &m in alive {
            live[family_of[m]] = true;
        }
        (0..n_families).filter(|&f| live[f]).collect::<Vec<_>>()
    };

    let family = loop {
        let live = live_families(&alive);
        match live.len() {
            0 => {
                let last = transcript.last().map(|(_, o): &(String, Vec<ClassLabel>)| o.iter().map(|l| l.0).collect());
                return Err(Error::OracleOutputInvalid(last.unwrap_or_default()));
            }
            1 => break Some(partition.families()[live[0]].id.clone()),
            _ => {}
        }
        let n_live = live.len() as u64;
        let scored: Vec<(u64, usize)> = unqueried(n, &queried)
            .map_init(
                || (Vec::<(u32, u32, u64)>::new(), Vec::<(u32, usize)>::new()),
                |(groups, seen), x| {
                    // Per output code: alive models answering it and the
                    // number of distinct families among them.
                    groups.clear();
                    seen.clear();
                    for &m in &alive {
                        let c = book.code(x, m);
                        let f = family_of[m];
                        match groups.iter_mut().find(|g| g.0 == c) {
                            Some(g) => g.1 += 1,
                            None => groups.push((c, 1, 0)),
                        }
                        if !seen.contains(&(c, f)) {
                            seen.push((c, f));
                            groups.iter_mut().find(|g| g.0 == c).expect("group exists").2 += 1;
                        }
                    }
                    if groups.iter().all(|g| g.2 == n_live) {
                        // Every answer keeps every family alive.
                        return None;
                    }
                    let score = match opts.rule {
                        ScoreRule::Expectation => groups.iter().map(|g| g.2 * u64::from(g.1)).sum(),
                        ScoreRule::WorstCase => groups.iter().map(|g| g.2).max().unwrap_or(0),
                    };
                    Some((score, x))
                },
            )
            .flatten()
            .collect();
        let Some((score, x)) = pick(scored, opts.ties, order.len()) else {
            break None;
        };
        if order.len() >= budget {
            return Err(Error::BudgetExhausted {
                queries_used: order.len(),
            });
        }
        let alive_before = alive.len();
        let answer = blackbox.query(x)?;
        let code = book.code_of(x, &answer);
        alive.retain(|&m| Some(book.code(x, m)) == code);
        queried[x] = true;
        order.push(x);
        steps.push(Step {
            step: order.len(),
            input: table.inputs()[x].clone(),
            output: answer.clone(),
            score: match opts.rule {
                ScoreRule::Expectation => score as f64 / alive_before as f64,
                ScoreRule::WorstCase => score as f64,
            },
            remaining_family: alive.len(),
            remaining_other: live_families(&alive).len(),
        });
        transcript.push((table.inputs()[x].clone(), answer));
    };

    let live = live_families(&alive);
    Ok(IdentificationOutcome {
        family,
        queries_used: order.len(),
        steps,
        final_state: CandidateState {
            step: order.len(),
            remaining_family: ids(table, &alive),
            remaining_other: live.iter().map(|&f| partition.families()[f].id.clone()).collect(),
            queried: input_ids(table, &order),
            transcript,
        },
    })
}

/// Expected number of queries of the sequential baseline, which runs one
/// detection per family in a random order until a positive answer.
///
/// `pos[j]` and `neg[j]` are the expected query counts of a positive and a
/// negative detection for family j.
pub fn sequential_expected_queries(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptyInput);
    }
    if pos.len() != neg.len() {
        return Err(Error::LengthMismatch {
            left: pos.len(),
            right: neg.len(),
        });
    }
    if pos.iter().chain(neg).any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::Config("expected query counts must be non-negative".into()));
    }
    let n = pos.len() as f64;
    Ok(pos.iter().sum::<f64>() / n + (n - 1.0) / (2.0 * n) * neg.iter().sum::<f64>())
}
