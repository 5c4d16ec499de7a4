//! Statistical detection and identification when the black-box may be a
//! variant nobody has seen: distance thresholds calibrated at a target false
//! positive rate, family delegates, and the two-stage identification.

mod protocol;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{PredictionTable, SelectionStrategy};
use crate::distance::{delegate_reports, model_distance, surject_column, SurjectedSequence};
use crate::error::{Error, Result};

pub use protocol::{run_protocol, ProtocolConfig, Report, ReportRow, Task};

/// Fewest negative distances a threshold may be calibrated on.
pub const MIN_NEGATIVES: usize = 20;

/// Which family member stands in for the family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelegateOption {
    #[default]
    Close,
    Median,
    Far,
    /// Close and median together, for compound distances.
    CloseMedian,
}

impl DelegateOption {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Close => "close",
            Self::Median => "median",
            Self::Far => "far",
            Self::CloseMedian => "close-median",
        }
    }
}

impl fmt::Display for DelegateOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DelegateOption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "close" => Ok(Self::Close),
            "median" => Ok(Self::Median),
            "far" => Ok(Self::Far),
            "close-median" | "close+median" => Ok(Self::CloseMedian),
            other => Err(Error::Config(format!(
                "unknown delegate option `{other}` (expected close, median, far or close-median)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelegateChoice {
    pub option: DelegateOption,
    /// Table model indices, one or two.
    pub delegates: Vec<usize>,
    /// Every member with its distance to the anchor, closest first.
    pub ranking: Vec<(usize, f64)>,
}

/// Picks the delegate(s) of `family` by distance to `anchor` on `queries`.
///
/// Members are ranked by (distance, model id); the median of an even-sized
/// family is the lower one.
pub fn choose_delegate(
    table: &PredictionTable,
    family: &[usize],
    anchor: usize,
    option: DelegateOption,
    queries: &[usize],
) -> Result<DelegateChoice> {
    if family.is_empty() {
        return Err(Error::EmptyDelegateSet);
    }
    let anchor_seq = surject_column(table, anchor, queries)?;
    let mut ranking = family
        .iter()
        .map(|&m| Ok((m, model_distance(&anchor_seq, &surject_column(table, m, queries)?)?.distance)))
        .collect::<Result<Vec<_>>>()?;
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| table.models()[a.0].cmp(&table.models()[b.0])));
    let close = ranking[0].0;
    let median = ranking[(ranking.len() - 1) / 2].0;
    let far = ranking[ranking.len() - 1].0;
    let mut delegates = match option {
        DelegateOption::Close => vec![close],
        DelegateOption::Median => vec![median],
        DelegateOption::Far => vec![far],
        DelegateOption::CloseMedian => vec![close, median],
    };
    delegates.dedup();
    Ok(DelegateChoice {
        option,
        delegates,
        ranking,
    })
}

/// Threshold test D_L < tau, calibrated on negative pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedTest {
    pub tau: f64,
    pub alpha: f64,
    /// Queries per distance.
    pub l: usize,
    pub strategy: Option<SelectionStrategy>,
    pub negatives_used: usize,
    /// Fraction of calibration negatives below tau.
    pub calibration_fpr: f64,
}

impl CalibratedTest {
    pub fn accepts(&self, distance: f64) -> bool {
        distance < self.tau
    }
}

/// Largest tau with at most a fraction `alpha` of `negatives` strictly below
/// it: the (floor(alpha n) + 1)-th smallest negative distance.
pub fn calibrate_from_distances(negatives: &[f64], alpha: f64, l: usize) -> Result<CalibratedTest> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha = {alpha} outside (0, 1)")));
    }
    if negatives.len() < MIN_NEGATIVES {
        return Err(Error::TooFewNegatives {
            got: negatives.len(),
            needed: MIN_NEGATIVES,
        });
    }
    if negatives.iter().any(|d| d.is_nan()) {
        return Err(Error::Config("NaN negative distance".into()));
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let m = (alpha * n as f64 + 1e-9).floor() as usize;
    let tau = sorted[m.min(n - 1)];
    let below = sorted.iter().take_while(|&&d| d < tau).count();
    Ok(CalibratedTest {
        tau,
        alpha,
        l,
        strategy: None,
        negatives_used: n,
        calibration_fpr: below as f64 / n as f64,
    })
}

/// Calibrates on (black-box, model) pairs known to be unrelated.
pub fn calibrate_threshold(
    negative_pairs: &[(SurjectedSequence, SurjectedSequence)],
    alpha: f64,
) -> Result<CalibratedTest> {
    let distances = negative_pairs
        .iter()
        .map(|(b, m)| Ok(model_distance(b, m)?.distance))
        .collect::<Result<Vec<_>>>()?;
    calibrate_from_distances(&distances, alpha, negative_pairs.first().map_or(0, |p| p.0.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantDecision {
    pub positive: bool,
    /// Compound distance to the delegates.
    pub distance: f64,
    pub delegate_distances: Vec<f64>,
}

/// Compound distance over delegates; degenerate delegates count as 1 and
/// an all-degenerate set is an error.
fn compound(b: &SurjectedSequence, delegates: &[SurjectedSequence]) -> Result<(f64, Vec<f64>)> {
    let reports = delegate_reports(b, delegates)?;
    if reports.iter().all(|r| r.degenerate) {
        return Err(Error::DegenerateEvidence);
    }
    let d: Vec<f64> = reports.iter().map(|r| r.distance).collect();
    Ok((d.iter().copied().fold(f64::INFINITY, f64::min), d))
}

/// Is `b` a variant of the family represented by `delegates`?
pub fn detect_variant(
    b: &SurjectedSequence,
    delegates: &[SurjectedSequence],
    test: &CalibratedTest,
) -> Result<VariantDecision> {
    let (distance, delegate_distances) = compound(b, delegates)?;
    Ok(VariantDecision {
        positive: test.accepts(distance),
        distance,
        delegate_distances,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "decision", content = "family")]
pub enum Decision {
    Family(String),
    Abstain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationVerdict {
    pub decision: Decision,
    /// Compound distance per family, closest first.
    pub distances: Vec<(String, f64)>,
    /// Second-best minus best distance.
    pub margin: f64,
}

/// Families ranked by compound distance, ties by family id. Families whose
/// delegates are all degenerate rank at distance 1.
fn rank_families(b: &SurjectedSequence, families: &[(String, Vec<SurjectedSequence>)]) -> Result<Vec<(String, f64)>> {
    if families.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut any_evidence = false;
    let mut ranked = families
        .iter()
        .map(|(id, delegates)| match compound(b, delegates) {
            Ok((d, _)) => {
                any_evidence = true;
                Ok((id.clone(), d))
            }
            Err(Error::DegenerateEvidence) => Ok((id.clone(), 1.0)),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    if !any_evidence {
        return Err(Error::DegenerateEvidence);
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// First stage: closest known family if its distance is below tau,
/// otherwise abstain (the black-box belongs to no known family).
pub fn identify_family(
    b: &SurjectedSequence,
    known: &[(String, Vec<SurjectedSequence>)],
    test: &CalibratedTest,
) -> Result<IdentificationVerdict> {
    if known.len() < 2 {
        return Err(Error::Config("identification needs at least two known families".into()));
    }
    let distances = rank_families(b, known)?;
    let (best_id, best) = distances[0].clone();
    Ok(IdentificationVerdict {
        decision: if test.accepts(best) {
            Decision::Family(best_id)
        } else {
            Decision::Abstain
        },
        margin: distances[1].1 - best,
        distances,
    })
}

/// Second stage: the closest variation family, without threshold.
pub fn identify_variation(b: &SurjectedSequence, families: &[(String, Vec<SurjectedSequence>)]) -> Result<String> {
    Ok(rank_families(b, families)?.swap_remove(0).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::table;

    fn seq(v: &[u8]) -> SurjectedSequence {
        SurjectedSequence::new(v.to_vec(), 1).unwrap()
    }

    #[test]
    fn separated_negatives_give_zero_fpr() {
        let t = calibrate_from_distances(&[1.0; 40], 0.05, 10).unwrap();
        assert_eq!(t.tau, 1.0);
        assert_eq!(t.calibration_fpr, 0.0);
        assert!(!t.accepts(1.0));
        assert!(t.accepts(0.999));
    }

    #[test]
    fn tau_is_the_lower_order_statistic() {
        // 100 evenly spread negatives on [0.5, 1.0]: floor(5) = 5 below tau.
        let d: Vec<f64> = (0..100).map(|i| 0.5 + 0.5 * i as f64 / 99.0).collect();
        let t = calibrate_from_distances(&d, 0.05, 10).unwrap();
        assert_eq!(t.tau, d[5]);
        assert!((t.tau - 0.525).abs() < 0.01);
        assert_eq!(t.calibration_fpr, 0.05);
        assert!(matches!(
            calibrate_from_distances(&d[..19], 0.05, 10),
            Err(Error::TooFewNegatives { got: 19, needed: 20 })
        ));
        assert!(calibrate_from_distances(&d, 1.0, 10).is_err());
    }

    #[test]
    fn delegate_options() {
        // Anchor m0; m1 is close to it, m2 farther, m3 unrelated.
        let t = table(
            &[
                &[&[1], &[1], &[0], &[0], &[1], &[0], &[1], &[0]],
                &[&[1], &[1], &[0], &[0], &[1], &[0], &[1], &[1]],
                &[&[1], &[1], &[0], &[1], &[1], &[0], &[0], &[1]],
                &[&[1], &[0], &[1], &[0], &[1], &[0], &[1], &[0]],
            ],
            3,
            Some(&[1; 8]),
        );
        let q: Vec<usize> = (0..8).collect();
        let pick = |fam: &[usize], o| choose_delegate(&t, fam, 0, o, &q).unwrap().delegates;
        assert_eq!(pick(&[0, 1, 2], DelegateOption::Close), vec![0]);
        assert_eq!(pick(&[0, 1, 2], DelegateOption::Median), vec![1]);
        assert_eq!(pick(&[0, 1, 2], DelegateOption::CloseMedian), vec![0, 1]);
        assert_eq!(pick(&[1, 2], DelegateOption::Median), vec![1]);
        assert_eq!(pick(&[0], DelegateOption::CloseMedian), vec![0]);
    }

    #[test]
    fn identification_abstains_above_tau() {
        let test = CalibratedTest {
            tau: 0.5,
            alpha: 0.05,
            l: 8,
            strategy: None,
            negatives_used: 20,
            calibration_fpr: 0.0,
        };
        let a = seq(&[0, 1, 1, 0, 1, 0, 0, 1]);
        let b = seq(&[1, 1, 0, 0, 1, 1, 0, 0]);
        let known = vec![("fa".to_string(), vec![a.clone()]), ("fb".to_string(), vec![b.clone()])];
        let v = identify_family(&a, &known, &test).unwrap();
        assert_eq!(v.decision, Decision::Family("fa".into()));
        assert_eq!(v.distances[0].1, 0.0);
        assert!(v.margin > 0.0);

        let stranger = seq(&[0, 0, 1, 1, 1, 1, 0, 0]);
        let v = identify_family(&stranger, &known, &test).unwrap();
        assert_eq!(v.decision, Decision::Abstain);

        assert!(matches!(
            identify_family(&seq(&[1; 8]), &known, &test),
            Err(Error::DegenerateEvidence)
        ));
        assert_eq!(identify_variation(&b, &known).unwrap(), "fb");
    }

    #[test]
    fn detect_variant_uses_the_compound_distance() {
        let test = calibrate_from_distances(&[0.9; 20], 0.05, 4).unwrap();
        let a = seq(&[0, 1, 1, 0]);
        let far = seq(&[0, 0, 1, 1]);
        let d = detect_variant(&a, &[far.clone(), a.clone()], &test).unwrap();
        assert!(d.positive);
        assert_eq!(d.distance, 0.0);
        assert!(!detect_variant(&a, &[far], &test).unwrap().positive);
        assert!(matches!(
            detect_variant(&a, &[seq(&[1, 1, 1, 1])], &test),
            Err(Error::DegenerateEvidence)
        ));
    }
}
