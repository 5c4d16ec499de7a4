//! Surjection S_k, empirical information measures and the normalized model
//! distance D_L.
//!
//! All logarithms are base 2. Every sum over probability cells is evaluated in
//! sorted order, which makes the results exactly invariant under swapping the
//! two sequences or relabeling the symbols of either one.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassLabel, PredictionTable};
use crate::error::{Error, Result};
use crate::family_sim::ChannelSpec;

/// Per-query symbols in S_k = {0..k}: the 1-based rank of the reference
/// class in the top-k output, or 0 when it is absent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurjectedSequence {
    values: Vec<u8>,
    k: usize,
}

impl SurjectedSequence {
    pub fn new(values: Vec<u8>, k: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySequence);
        }
        if k == 0 || k > u8::MAX as usize - 1 {
            return Err(Error::Config(format!("rank depth {k} out of range")));
        }
        if let Some(v) = values.iter().find(|&&v| v as usize > k) {
            return Err(Error::Consistency(format!("symbol {v} outside S_{k}")));
        }
        Ok(Self { values, k })
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }

    /// Symbol counts, `k + 1` entries.
    pub fn histogram(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.k + 1];
        for &v in &self.values {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// S_k applied to one top-k output.
pub fn surject(output: &[ClassLabel], reference: ClassLabel) -> u8 {
    output
        .iter()
        .position(|&c| c == reference)
        .map_or(0, |r| (r + 1) as u8)
}

/// Surjected outputs of a table model on `queries`.
pub fn surject_column(table: &PredictionTable, model: usize, queries: &[usize]) -> Result<SurjectedSequence> {
    SurjectedSequence::new(
        queries
            .iter()
            .map(|&x| surject(table.output(model, x), table.reference(x)))
            .collect(),
        table.k(),
    )
}

/// Counts of (z, y) symbol pairs; row index z, column index y.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointHistogram {
    k: usize,
    counts: Vec<u64>,
    total: u64,
}

impl JointHistogram {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, z: usize, y: usize) -> u64 {
        self.counts[z * (self.k + 1) + y]
    }

    pub fn z_marginal(&self) -> Vec<u64> {
        let w = self.k + 1;
        (0..w).map(|z| self.counts[z * w..(z + 1) * w].iter().sum()).collect()
    }

    pub fn y_marginal(&self) -> Vec<u64> {
        let w = self.k + 1;
        (0..w).map(|y| (0..w).map(|z| self.counts[z * w + y]).sum()).collect()
    }

    /// Empirical joint probability P̂(z, y).
    pub fn probability(&self, z: usize, y: usize) -> f64 {
        self.count(z, y) as f64 / self.total as f64
    }
}

pub fn joint_histogram(z: &SurjectedSequence, y: &SurjectedSequence) -> Result<JointHistogram> {
    if z.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: z.len(),
            right: y.len(),
        });
    }
    if z.k != y.k {
        return Err(Error::Consistency(format!("rank depths differ ({} vs {})", z.k, y.k)));
    }
    let w = z.k + 1;
    let mut counts = vec![0u64; w * w];
    for (&a, &b) in z.values.iter().zip(&y.values) {
        counts[a as usize * w + b as usize] += 1;
    }
    Ok(JointHistogram {
        k: z.k,
        counts,
        total: z.len() as u64,
    })
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Entropy in bits of the empirical distribution given by `counts`.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let l = total as f64;
    sorted_sum(
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| (c as f64 / l) * (l / c as f64).log2())
            .collect(),
    )
}

/// Empirical mutual information Î(Z;Y) in bits; 0·log 0 terms vanish.
pub fn empirical_mi(h: &JointHistogram) -> f64 {
    if h.total == 0 {
        return 0.0;
    }
    let w = h.k + 1;
    let pz = h.z_marginal();
    let py = h.y_marginal();
    let l = h.total as f64;
    let mut terms = Vec::with_capacity(w * w);
    for (z, &cz) in pz.iter().enumerate() {
        for (y, &cy) in py.iter().enumerate() {
            let c = h.counts[z * w + y];
            if c == 0 {
                continue;
            }
            // P̂(z,y) / (P̂(z) P̂(y)) = c·L / (c_z·c_y), exact in integers.
            let ratio = (c * h.total) as f64 / (cz * cy) as f64;
            terms.push((c as f64 / l) * ratio.log2());
        }
    }
    sorted_sum(terms).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub mi_bits: f64,
    pub h_z_bits: f64,
    pub h_y_bits: f64,
    /// 1 - I / min(H_z, H_y); set to 1 when `degenerate`.
    pub distance: f64,
    pub len: usize,
    /// One of the sequences is constant, so the normalization is undefined
    /// and the distance carries no evidence.
    pub degenerate: bool,
}

/// D_L between the black-box sequence `z` and a model sequence `y`.
pub fn model_distance(z: &SurjectedSequence, y: &SurjectedSequence) -> Result<DistanceReport> {
    let h = joint_histogram(z, y)?;
    let h_z = entropy_bits(&h.z_marginal());
    let h_y = entropy_bits(&h.y_marginal());
    let min_h = h_z.min(h_y);
    if min_h <= 0.0 {
        return Ok(DistanceReport {
            mi_bits: 0.0,
            h_z_bits: h_z,
            h_y_bits: h_y,
            distance: 1.0,
            len: z.len(),
            degenerate: true,
        });
    }
    let mi = empirical_mi(&h);
    Ok(DistanceReport {
        mi_bits: mi,
        h_z_bits: h_z,
        h_y_bits: h_y,
        distance: (1.0 - (mi / min_h).min(1.0)).max(0.0),
        len: z.len(),
        degenerate: false,
    })
}

/// Distance from `b` to each delegate.
pub fn delegate_reports(b: &SurjectedSequence, delegates: &[SurjectedSequence]) -> Result<Vec<DistanceReport>> {
    if delegates.is_empty() {
        return Err(Error::EmptyDelegateSet);
    }
    delegates.iter().map(|d| model_distance(b, d)).collect()
}

/// D_L(b, F) = min over delegates of D_L(b, delegate).
pub fn compound_distance(b: &SurjectedSequence, delegates: &[SurjectedSequence]) -> Result<f64> {
    Ok(delegate_reports(b, delegates)?
        .iter()
        .map(|r| r.distance)
        .fold(f64::INFINITY, f64::min))
}

/// Top-1 accuracies of a model (A) and the black-box (B).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInput {
    pub a: f64,
    pub b: f64,
}

/// -x log2 x, with f(0) = 0.
pub fn neg_x_log_x(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -x * x.log2()
    }
}

pub fn binary_entropy(p: f64) -> f64 {
    neg_x_log_x(p) + neg_x_log_x(1.0 - p)
}

/// Smallest D_L achievable between two top-1 classifiers of accuracies A and
/// B, whatever their joint behavior.
///
/// With the accuracies fixed, the 2x2 joint table has one free cell and the
/// mutual information is maximal at an end of its feasible range; the bound
/// normalizes that maximum by min(h(A), h(B)). Only defined for A + B > 1.
pub fn theory_lower_bound(inp: BoundInput) -> Result<f64> {
    let BoundInput { a, b } = inp;
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    if !in_unit(a) || !in_unit(b) {
        return Err(Error::InfeasibleAccuracies { a, b });
    }
    // Feasible range of the free cell: max(0, 1-(A+B)) <= a <= min(1-A, 1-B).
    if (1.0 - (a + b)).max(0.0) > (1.0 - a).min(1.0 - b) {
        return Err(Error::InfeasibleAccuracies { a, b });
    }
    if a + b <= 1.0 {
        return Err(Error::OutOfRegime { a, b });
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    let f = neg_x_log_x;
    let mi_max = f(hi) + (f(lo) - f(hi + lo - 1.0)).max(f(1.0 - lo) - f(hi - lo));
    let norm = binary_entropy(hi).min(binary_entropy(lo));
    if norm <= 0.0 {
        // A or B is 0 or 1: one output is constant and D_L is undefined.
        return Err(Error::InfeasibleAccuracies { a, b });
    }
    let bound = 1.0 - mi_max / norm;
    Ok(if bound.abs() <= 1e-12 { 0.0 } else { bound.clamp(0.0, 1.0) })
}

/// Mutual information (bits) of the joint p_y(y)·W(z|y).
pub fn channel_mi(w: &ChannelSpec, p_y: &[f64]) -> f64 {
    let p_z = w.output_distribution(p_y);
    let mut terms = Vec::new();
    for (y, &py) in p_y.iter().enumerate() {
        for (z, &wzy) in w.row(y).iter().enumerate() {
            let joint = py * wzy;
            if joint > 0.0 {
                terms.push(joint * (wzy / p_z[z]).log2());
            }
        }
    }
    sorted_sum(terms).max(0.0)
}

/// Analytic counterpart of D_L for a channel fed with p_y.
pub fn channel_distance(w: &ChannelSpec, p_y: &[f64]) -> f64 {
    let entropy = |p: &[f64]| sorted_sum(p.iter().map(|&q| neg_x_log_x(q)).collect());
    let norm = entropy(p_y).min(entropy(&w.output_distribution(p_y)));
    if norm <= 0.0 {
        return 1.0;
    }
    (1.0 - channel_mi(w, p_y) / norm).clamp(0.0, 1.0)
}

/// Symmetric D_L matrix over `models`, evaluated on `queries`.
///
/// Pairs are computed in parallel; the result does not depend on the thread
/// count.
pub fn distance_matrix(table: &PredictionTable, models: &[usize], queries: &[usize]) -> Result<Vec<Vec<f64>>> {
    let seqs = models
        .iter()
        .map(|&m| surject_column(table, m, queries))
        .collect::<Result<Vec<_>>>()?;
    let n = models.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| model_distance(&seqs[i], &seqs[j]).map(|r| r.distance))
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = vec![vec![0.0; n]; n];
    for (i, s) in seqs.iter().enumerate() {
        // Constant sequences have no defined self-distance.
        if s.is_constant() {
            matrix[i][i] = 1.0;
        }
    }
    for (&(i, j), d) in pairs.iter().zip(values) {
        matrix[i][j] = d;
        matrix[j][i] = d;
    }
    Ok(matrix)
}

/// Square CSV with a header row and column of model ids.
pub fn write_distance_matrix_csv<W: Write>(out: &mut W, ids: &[&str], matrix: &[Vec<f64>]) -> Result<()> {
    write!(out, "model")?;
    for id in ids {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    for (id, row) in ids.iter().zip(matrix) {
        write!(out, "{id}")?;
        for d in row {
            write!(out, ",{d}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn seq(v: &[u8], k: usize) -> SurjectedSequence {
        SurjectedSequence::new(v.to_vec(), k).unwrap()
    }

    fn labels(v: &[u32]) -> Vec<ClassLabel> {
        v.iter().copied().map(ClassLabel).collect()
    }

    #[test]
    fn surjection_rank_or_zero() {
        assert_eq!(surject(&labels(&[7, 42, 3]), ClassLabel(42)), 2);
        assert_eq!(surject(&labels(&[7, 42, 3]), ClassLabel(9)), 0);
        assert_eq!(surject(&labels(&[5]), ClassLabel(5)), 1);
    }

    #[test]
    fn sequences_validate_symbols() {
        assert!(matches!(SurjectedSequence::new(vec![], 1), Err(Error::EmptySequence)));
        assert!(SurjectedSequence::new(vec![0, 2], 1).is_err());
        assert!(SurjectedSequence::new(vec![0, 2], 2).is_ok());
    }

    #[test]
    fn joint_histogram_tallies() {
        let h = joint_histogram(&seq(&[0, 1], 1), &seq(&[0, 1], 1)).unwrap();
        assert_eq!((h.count(0, 0), h.count(1, 1), h.count(0, 1), h.total()), (1, 1, 0, 2));

        let h = joint_histogram(&seq(&[0, 1, 0, 0], 1), &seq(&[0, 1, 0, 1], 1)).unwrap();
        assert_eq!((h.count(0, 0), h.count(1, 1), h.count(0, 1), h.count(1, 0)), (2, 1, 1, 0));
        assert_eq!(h.z_marginal(), vec![3, 1]);
        assert_eq!(h.y_marginal(), vec![2, 2]);

        assert!(matches!(
            joint_histogram(&seq(&[0, 1], 1), &seq(&[0], 1)),
            Err(Error::LengthMismatch { left: 2, right: 1 })
        ));
    }

    #[test]
    fn mi_examples() {
        let h = joint_histogram(&seq(&[0, 1, 0, 1], 1), &seq(&[0, 0, 1, 1], 1)).unwrap();
        assert_eq!(empirical_mi(&h), 0.0);

        let s = seq(&[0, 1, 1, 2, 0, 1], 2);
        let h = joint_histogram(&s, &s).unwrap();
        assert_eq!(empirical_mi(&h), entropy_bits(&s.histogram()));

        // Hand evaluation: 1/2 log2(4/3) + 1/4 log2(2) + 1/4 log2(2/3).
        let h = joint_histogram(&seq(&[0, 1, 0, 0], 1), &seq(&[0, 1, 0, 1], 1)).unwrap();
        let hand = 0.5 * (4.0f64 / 3.0).log2() + 0.25 + 0.25 * (2.0f64 / 3.0).log2();
        assert_abs_diff_eq!(empirical_mi(&h), hand, epsilon = 1e-12);
        assert_abs_diff_eq!(empirical_mi(&h), 0.31128, epsilon = 1e-4);
    }

    #[test]
    fn distance_examples() {
        let s = seq(&[0, 1, 1, 0, 1], 1);
        let r = model_distance(&s, &s).unwrap();
        assert_eq!(r.distance, 0.0);
        assert!(!r.degenerate);

        let r = model_distance(&seq(&[0, 1, 0, 1], 1), &seq(&[0, 0, 1, 1], 1)).unwrap();
        assert_eq!(r.distance, 1.0);

        let r = model_distance(&seq(&[0, 1, 0, 0], 1), &seq(&[0, 1, 0, 1], 1)).unwrap();
        assert_abs_diff_eq!(r.h_z_bits, 0.81128, epsilon = 1e-5);
        assert_abs_diff_eq!(r.distance, 1.0 - 0.31128 / 0.81128, epsilon = 1e-3);
        assert_abs_diff_eq!(r.distance, 0.6163, epsilon = 1e-3);
    }

    #[test]
    fn constant_sequence_is_flagged_degenerate() {
        let r = model_distance(&seq(&[1, 1, 1], 1), &seq(&[0, 1, 1], 1)).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.distance, 1.0);
        assert_eq!(r.mi_bits, 0.0);
    }

    #[test]
    fn compound_is_min_over_delegates() {
        let b = seq(&[0, 1, 0, 0], 1);
        let y = seq(&[0, 1, 0, 1], 1);
        assert_eq!(
            compound_distance(&b, std::slice::from_ref(&y)).unwrap(),
            model_distance(&b, &y).unwrap().distance
        );
        let far = seq(&[0, 0, 1, 1], 1);
        assert_eq!(compound_distance(&b, &[far.clone(), b.clone(), y.clone()]).unwrap(), 0.0);
        assert!(matches!(compound_distance(&b, &[]), Err(Error::EmptyDelegateSet)));
    }

    #[test]
    fn bound_vanishes_on_the_diagonal_and_rejects_bad_regimes() {
        assert_eq!(theory_lower_bound(BoundInput { a: 0.8, b: 0.8 }).unwrap(), 0.0);
        assert!(theory_lower_bound(BoundInput { a: 0.8, b: 0.6 }).unwrap() > 0.0);
        assert_eq!(
            theory_lower_bound(BoundInput { a: 0.8, b: 0.6 }).unwrap(),
            theory_lower_bound(BoundInput { a: 0.6, b: 0.8 }).unwrap()
        );
        assert!(matches!(
            theory_lower_bound(BoundInput { a: 0.4, b: 0.5 }),
            Err(Error::OutOfRegime { .. })
        ));
        assert!(matches!(
            theory_lower_bound(BoundInput { a: 1.2, b: 0.5 }),
            Err(Error::InfeasibleAccuracies { .. })
        ));
    }

    #[test]
    fn channel_mi_examples() {
        let identity = ChannelSpec::from_matrix(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(channel_mi(&identity, &[0.5, 0.5]), 1.0, epsilon = 1e-15);

        let flat = ChannelSpec::from_matrix(vec![vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        assert_eq!(channel_mi(&flat, &[0.4, 0.6]), 0.0);

        let bsc = ChannelSpec::from_matrix(vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        assert_abs_diff_eq!(channel_mi(&bsc, &[0.5, 0.5]), 1.0 - binary_entropy(0.1), epsilon = 1e-12);
        assert_abs_diff_eq!(channel_mi(&bsc, &[0.5, 0.5]), 0.5310, epsilon = 1e-4);
    }

    #[test]
    fn matrix_is_symmetric_with_zero_diagonal() {
        use crate::corpus::fixtures::table;
        let t = table(
            &[
                &[&[1], &[0], &[1], &[3]],
                &[&[1], &[2], &[2], &[3]],
                &[&[0], &[2], &[1], &[1]],
            ],
            5,
            Some(&[1, 2, 1, 3]),
        );
        let m = distance_matrix(&t, &[0, 1, 2], &[0, 1, 2, 3]).unwrap();
        for i in 0..3 {
            assert_eq!(m[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
        let mut out = Vec::new();
        write_distance_matrix_csv(&mut out, &["a", "b", "c"], &m).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("model,a,b,c\na,0,"));
        assert_eq!(text.lines().count(), 4);
    }
}
