use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{ClassLabel, PredictionTable};
use crate::distance::entropy_bits;
use crate::error::{Error, Result};
use crate::seed;

/// How the query subset X' is drawn from the inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    All,
    Split5050,
    Split3070,
    Entropy,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 4] = [Self::All, Self::Split5050, Self::Split3070, Self::Entropy];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Split5050 => "split5050",
            Self::Split3070 => "split3070",
            Self::Entropy => "entropy",
        }
    }

    /// Percentage of anchor-correct inputs for the split strategies.
    fn correct_percent(self) -> Option<usize> {
        match self {
            Self::Split5050 => Some(50),
            Self::Split3070 => Some(30),
            _ => None,
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Self::All),
            "split5050" | "50/50" | "5050" => Ok(Self::Split5050),
            "split3070" | "30/70" | "3070" => Ok(Self::Split3070),
            "entropy" => Ok(Self::Entropy),
            other => Err(Error::Config(format!(
                "unknown selection strategy `{other}` (expected all, split5050, split3070 or entropy)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSubset {
    pub strategy: SelectionStrategy,
    /// Input indices into the table, in query order.
    pub inputs: Vec<usize>,
    pub seed: u64,
}

impl SelectionSubset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn ids<'a>(&self, table: &'a PredictionTable) -> Vec<&'a str> {
        self.inputs.iter().map(|&x| table.inputs()[x].as_str()).collect()
    }
}

/// Empirical entropy (bits) of the top-1 labels of `known` on each input,
/// sorted by decreasing entropy; ties keep table order.
pub fn entropy_ranking(table: &PredictionTable, known: &[usize]) -> Vec<(usize, f64)> {
    let mut counts: HashMap<ClassLabel, u64> = HashMap::with_capacity(known.len());
    let mut ranked: Vec<(usize, f64)> = (0..table.n_inputs())
        .map(|x| {
            counts.clear();
            for &m in known {
                *counts.entry(table.top1(m, x)).or_default() += 1;
            }
            let c: Vec<u64> = counts.values().copied().collect();
            (x, entropy_bits(&c))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Draws the query subset X' for one experiment.
///
/// * `All`: uniform sample of `size` inputs.
/// * `Split5050` / `Split3070`: stratified sample where 50% / 30% of the
///   inputs are classified correctly (top-1 equals reference class) by
///   `anchor`, the rest incorrectly.
/// * `Entropy`: the `size` inputs whose top-1 labels over `known` have the
///   highest entropy; independent of `seed`.
pub fn select_inputs(
    table: &PredictionTable,
    strategy: SelectionStrategy,
    size: usize,
    anchor: Option<usize>,
    known: Option<&[usize]>,
    seed: u64,
) -> Result<SelectionSubset> {
    let n = table.n_inputs();
    let mut rng = seed::stream(seed, "select", &[]);
    let inputs = match strategy {
        SelectionStrategy::All => {
            if size > n {
                return Err(Error::InsufficientPool {
                    stratum: "all",
                    requested: size,
                    available: n,
                });
            }
            index::sample(&mut rng, n, size).into_vec()
        }
        SelectionStrategy::Split5050 | SelectionStrategy::Split3070 => {
            let anchor = anchor.ok_or_else(|| {
                Error::Config(format!("strategy {strategy} needs an anchor model"))
            })?;
            let pct = strategy.correct_percent().expect("split strategy");
            let n_correct = (size * pct + 50) / 100;
            let (correct, wrong): (Vec<usize>, Vec<usize>) =
                (0..n).partition(|&x| table.top1(anchor, x) == table.reference(x));
            let mut picked = sample_stratum(&mut rng, &correct, n_correct, "anchor-correct")?;
            picked.extend(sample_stratum(&mut rng, &wrong, size - n_correct, "anchor-wrong")?);
            picked.shuffle(&mut rng);
            picked
        }
        SelectionStrategy::Entropy => {
            let known = known.ok_or_else(|| Error::Config("entropy selection needs a known model set".into()))?;
            if known.is_empty() {
                return Err(Error::Config("entropy selection needs a non-empty known set".into()));
            }
            if size > n {
                return Err(Error::InsufficientPool {
                    stratum: "entropy",
                    requested: size,
                    available: n,
                });
            }
            entropy_ranking(table, known)
                .into_iter()
                .take(size)
                .map(|(x, _)| x)
                .collect()
        }
    };
    Ok(SelectionSubset {
        strategy,
        inputs,
        seed,
    })
}

fn sample_stratum(
    rng: &mut impl rand::Rng,
    pool: &[usize],
    size: usize,
    stratum: &'static str,
) -> Result<Vec<usize>> {
    match pool.len().cmp(&size) {
        Ordering::Less => Err(Error::InsufficientPool {
            stratum,
            requested: size,
            available: pool.len(),
        }),
        _ => Ok(index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|i| pool[i])
            .collect()),
    }
}
