//! Black-box query oracles. Inputs are addressed by their index in the
//! prediction table, which is the shared input universe.

use crate::corpus::{ClassLabel, PredictionTable};
use crate::distance::{surject, SurjectedSequence};
use crate::error::{Error, Result};

pub trait BlackBox {
    /// Top-k output on one input.
    fn query(&mut self, input: usize) -> Result<Vec<ClassLabel>>;

    /// Number of queries answered so far.
    fn queries(&self) -> usize;
}

/// Replays a model stored in a table.
#[derive(Debug)]
pub struct ReplayOracle<'a> {
    table: &'a PredictionTable,
    model: usize,
    count: usize,
}

impl<'a> ReplayOracle<'a> {
    pub fn new(table: &'a PredictionTable, model: usize) -> Self {
        Self { table, model, count: 0 }
    }

    pub fn by_id(table: &'a PredictionTable, id: &str) -> Result<Self> {
        Ok(Self::new(table, table.model_idx(id)?))
    }
}

impl BlackBox for ReplayOracle<'_> {
    fn query(&mut self, input: usize) -> Result<Vec<ClassLabel>> {
        if input >= self.table.n_inputs() {
            return Err(Error::UnknownInput(format!("#{input}")));
        }
        self.count += 1;
        Ok(self.table.output(self.model, input).to_vec())
    }

    fn queries(&self) -> usize {
        self.count
    }
}

/// Answers from a flat top-k column that is not part of any table, such as
/// a freshly simulated variant.
#[derive(Clone, Debug)]
pub struct ColumnOracle {
    column: Vec<ClassLabel>,
    k: usize,
    count: usize,
}

impl ColumnOracle {
    pub fn new(column: Vec<ClassLabel>, k: usize) -> Self {
        Self { column, k, count: 0 }
    }
}

impl BlackBox for ColumnOracle {
    fn query(&mut self, input: usize) -> Result<Vec<ClassLabel>> {
        let cell = self
            .column
            .get(input * self.k..(input + 1) * self.k)
            .ok_or_else(|| Error::UnknownInput(format!("#{input}")))?;
        self.count += 1;
        Ok(cell.to_vec())
    }

    fn queries(&self) -> usize {
        self.count
    }
}

/// Queries `inputs` in order and surjects the answers against the table's
/// reference classes.
pub fn observe(oracle: &mut dyn BlackBox, table: &PredictionTable, inputs: &[usize]) -> Result<SurjectedSequence> {
    let values = inputs
        .iter()
        .map(|&x| Ok(surject(&oracle.query(x)?, table.reference(x))))
        .collect::<Result<Vec<_>>>()?;
    SurjectedSequence::new(values, table.k())
}
