//! Prediction tables: the offline database of top-k outputs, one per
//! (model, input), plus the family partitions and input subsets built on it.

mod io;
mod partition;
mod select;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_ground_truth, load_table, load_table_with, read_table_csv, save_ground_truth, save_table,
    write_table_csv, LoadOptions, TableFormat,
};
pub use partition::{load_model_list, Family, FamilyFlavor, FamilyPartition};
pub use select::{entropy_ranking, select_inputs, SelectionStrategy, SelectionSubset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
#[repr(transparent)]
pub struct ClassLabel(pub u32);

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An ordered top-k answer: `ranks[0]` is the most likely class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TopKOutput(Vec<ClassLabel>);

impl TopKOutput {
    pub fn new(ranks: Vec<ClassLabel>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Consistency("top-k output must hold at least one class".into()));
        }
        if !all_distinct(&ranks) {
            return Err(Error::Consistency(format!("repeated class in top-k output {ranks:?}")));
        }
        Ok(Self(ranks))
    }

    pub fn from_slice(ranks: &[ClassLabel]) -> Result<Self> {
        Self::new(ranks.to_vec())
    }

    pub fn ranks(&self) -> &[ClassLabel] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn top1(&self) -> ClassLabel {
        self.0[0]
    }
}

pub(crate) fn all_distinct(labels: &[ClassLabel]) -> bool {
    labels
        .iter()
        .enumerate()
        .all(|(i, a)| labels[i + 1..].iter().all(|b| a != b))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.is_ascii()
        && !id
            .bytes()
            .any(|b| matches!(b, b',' | b'"' | b'\n' | b'\r') || b.is_ascii_control())
}

/// Raw material for a [`PredictionTable`]; `columns[m]` holds `n_inputs * k`
/// labels in input order.
#[derive(Clone, Debug)]
pub struct TableParts {
    pub models: Vec<String>,
    pub inputs: Vec<String>,
    pub k: usize,
    pub num_classes: u32,
    pub columns: Vec<Vec<ClassLabel>>,
    /// Either empty (no annotation) or one entry per input.
    pub ground_truth: Vec<Option<ClassLabel>>,
}

/// Immutable map (model, input) -> top-k list.
///
/// Labels are stored model-major in one flat buffer. Reference classes are
/// computed once at construction.
#[derive(Clone, Debug)]
pub struct PredictionTable {
    models: Vec<String>,
    model_index: HashMap<String, usize>,
    inputs: Vec<String>,
    input_index: HashMap<String, usize>,
    k: usize,
    num_classes: u32,
    labels: Vec<ClassLabel>,
    ground_truth: Vec<Option<ClassLabel>>,
    references: Vec<ClassLabel>,
}

impl PredictionTable {
    pub fn from_parts(parts: TableParts) -> Result<Self> {
        let TableParts {
            models,
            inputs,
            k,
            num_classes,
            columns,
            ground_truth,
        } = parts;

        if num_classes < 2 {
            return Err(Error::Consistency(format!("need at least 2 classes, got {num_classes}")));
        }
        if k == 0 || k > num_classes as usize {
            return Err(Error::Consistency(format!("rank depth k={k} outside [1, {num_classes}]")));
        }
        if models.is_empty() || inputs.is_empty() {
            return Err(Error::Consistency("table needs at least one model and one input".into()));
        }
        let model_index = index_ids(&models, "model")?;
        let input_index = index_ids(&inputs, "input")?;
        if columns.len() != models.len() {
            return Err(Error::Consistency(format!(
                "{} columns for {} models",
                columns.len(),
                models.len()
            )));
        }

        let n = inputs.len();
        let mut labels = Vec::with_capacity(models.len() * n * k);
        for (m, column) in columns.into_iter().enumerate() {
            if column.len() != n * k {
                return Err(Error::Consistency(format!(
                    "model `{}` has {} labels, expected {}",
                    models[m],
                    column.len(),
                    n * k
                )));
            }
            for (x, cell) in column.chunks_exact(k).enumerate() {
                if let Some(bad) = cell.iter().find(|c| c.0 >= num_classes) {
                    return Err(Error::Consistency(format!(
                        "label {bad} >= C={num_classes} at ({}, {})",
                        models[m], inputs[x]
                    )));
                }
                if !all_distinct(cell) {
                    return Err(Error::Consistency(format!(
                        "repeated label in ({}, {})",
                        models[m], inputs[x]
                    )));
                }
            }
            labels.extend(column);
        }

        let ground_truth = if ground_truth.is_empty() {
            vec![None; n]
        } else if ground_truth.len() == n {
            if let Some(bad) = ground_truth.iter().flatten().find(|c| c.0 >= num_classes) {
                return Err(Error::Consistency(format!("ground-truth label {bad} >= C={num_classes}")));
            }
            ground_truth
        } else {
            return Err(Error::Consistency(format!(
                "{} ground-truth entries for {n} inputs",
                ground_truth.len()
            )));
        };

        let mut table = Self {
            models,
            model_index,
            inputs,
            input_index,
            k,
            num_classes,
            labels,
            ground_truth,
            references: Vec::new(),
        };
        table.references = (0..n)
            .map(|x| {
                table.ground_truth[x].unwrap_or_else(|| {
                    majority_vote((0..table.n_models()).map(|m| table.top1(m, x)))
                        .expect("table has at least one model")
                })
            })
            .collect();
        Ok(table)
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn cell_count(&self) -> usize {
        self.n_models() * self.n_inputs()
    }

    pub fn model_idx(&self, id: &str) -> Result<usize> {
        self.model_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    pub fn input_idx(&self, id: &str) -> Result<usize> {
        self.input_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownInput(id.to_string()))
    }

    #[inline]
    pub fn output(&self, model: usize, input: usize) -> &[ClassLabel] {
        let start = (model * self.inputs.len() + input) * self.k;
        &self.labels[start..start + self.k]
    }

    #[inline]
    pub fn top1(&self, model: usize, input: usize) -> ClassLabel {
        self.labels[(model * self.inputs.len() + input) * self.k]
    }

    /// All labels of one model, `n_inputs * k` long.
    pub fn column(&self, model: usize) -> &[ClassLabel] {
        let width = self.inputs.len() * self.k;
        &self.labels[model * width..(model + 1) * width]
    }

    pub fn ground_truth(&self, input: usize) -> Option<ClassLabel> {
        self.ground_truth[input]
    }

    pub fn has_ground_truth(&self) -> bool {
        self.ground_truth.iter().all(Option::is_some)
    }

    pub fn ground_truth_labels(&self) -> Result<Vec<ClassLabel>> {
        self.ground_truth
            .iter()
            .enumerate()
            .map(|(x, g)| g.ok_or_else(|| Error::MissingGroundTruth(self.inputs[x].clone())))
            .collect()
    }

    /// Reference class c(x): the annotation when present, else the majority
    /// top-1 vote over all models of the table.
    #[inline]
    pub fn reference(&self, input: usize) -> ClassLabel {
        self.references[input]
    }

    pub fn references(&self) -> &[ClassLabel] {
        &self.references
    }

    /// Keeps the first `k` ranks of every cell.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::Config(format!("cannot truncate top-{} outputs to top-{k}", self.k)));
        }
        if k == self.k {
            return Ok(self.clone());
        }
        let columns = (0..self.n_models())
            .map(|m| {
                (0..self.n_inputs())
                    .flat_map(|x| self.output(m, x)[..k].iter().copied())
                    .collect()
            })
            .collect();
        Self::from_parts(TableParts {
            models: self.models.clone(),
            inputs: self.inputs.clone(),
            k,
            num_classes: self.num_classes,
            columns,
            ground_truth: self.ground_truth.clone(),
        })
    }

    pub fn model_indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter().map(|id| self.model_idx(id)).collect()
    }
}

fn index_ids(ids: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if !valid_id(id) {
            return Err(Error::Consistency(format!("invalid {what} id {id:?}")));
        }
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::Consistency(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(index)
}

/// Most frequent label; ties go to the smallest label id.
pub fn majority_vote(votes: impl IntoIterator<Item = ClassLabel>) -> Option<ClassLabel> {
    let mut counts: HashMap<ClassLabel, usize> = HashMap::new();
    for v in votes {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
        .map(|(label, _)| label)
}

/// Reference class of `input`; see [`PredictionTable::reference`].
pub fn reference_class(table: &PredictionTable, input: usize) -> ClassLabel {
    table.reference(input)
}
