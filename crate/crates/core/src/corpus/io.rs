use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassLabel, PredictionTable, TableParts};
use crate::error::{Error, Result};

const PREDICTION_HEADER: [&str; 4] = ["model", "input", "rank", "label"];
const TRUTH_HEADER: [&str; 2] = ["input", "label"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
}

impl TableFormat {
    /// `.json` selects JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Self::Json,
            _ => Self::Csv,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Class count C; inferred as `max label + 1` (at least 2) when absent.
    pub num_classes: Option<u32>,
    /// Ground-truth CSV (`input,label`).
    pub ground_truth: Option<PathBuf>,
}

pub fn load_table(path: &Path, format: TableFormat) -> Result<PredictionTable> {
    load_table_with(path, format, &LoadOptions::default())
}

pub fn load_table_with(path: &Path, format: TableFormat, opts: &LoadOptions) -> Result<PredictionTable> {
    let file = BufReader::new(File::open(path)?);
    let table = match format {
        TableFormat::Csv => read_table_csv(file, path, opts.num_classes)?,
        TableFormat::Json => read_table_json(file, opts.num_classes)?,
    };
    match &opts.ground_truth {
        None => Ok(table),
        Some(gt) => attach_ground_truth(table, load_ground_truth(gt)?, opts.num_classes.is_none()),
    }
}

pub fn save_table(table: &PredictionTable, path: &Path, format: TableFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        TableFormat::Csv => write_table_csv(table, &mut out)?,
        TableFormat::Json => {
            serde_json::to_writer(&mut out, &JsonTable::from(table))?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Canonical CSV: model-major, inputs in table order, ranks ascending.
pub fn write_table_csv<W: Write>(table: &PredictionTable, out: &mut W) -> Result<()> {
    writeln!(out, "{}", PREDICTION_HEADER.join(","))?;
    for (m, model) in table.models().iter().enumerate() {
        for (x, input) in table.inputs().iter().enumerate() {
            for (r, label) in table.output(m, x).iter().enumerate() {
                writeln!(out, "{model},{input},{},{label}", r + 1)?;
            }
        }
    }
    Ok(())
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn check_header(rdr: &mut csv::Reader<impl Read>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| h.trim() != *e) {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(())
}

fn parse_u32(field: &str, what: &str, path: &Path, line: u64) -> Result<u32> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("{what} `{field}` is not a non-negative integer")))
}

struct Interner {
    ids: Vec<String>,
    index: std::collections::HashMap<String, u32>,
}

impl Interner {
    fn new() -> Self {
        Self {
            ids: Vec::new(),
            index: Default::default(),
        }
    }

    fn intern(&mut self, id: &str) -> u32 {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len() as u32;
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }
}

/// Parses `model,input,rank,label` rows. Model and input order follow first
/// appearance.
pub fn read_table_csv<R: Read>(reader: R, source: &Path, num_classes: Option<u32>) -> Result<PredictionTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    check_header(&mut rdr, source, &PREDICTION_HEADER)?;

    let mut models = Interner::new();
    let mut inputs = Interner::new();
    // (model, input, rank, label, line)
    let mut rows: Vec<(u32, u32, u32, u32, u64)> = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(parse_err(source, line, e.to_string()));
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(parse_err(source, line, format!("expected 4 fields, found {}", record.len())));
        }
        let model = record[0].trim();
        let input = record[1].trim();
        if model.is_empty() || input.is_empty() {
            return Err(parse_err(source, line, "empty model or input id"));
        }
        let rank = parse_u32(&record[2], "rank", source, line)?;
        if rank == 0 {
            return Err(parse_err(source, line, "ranks start at 1"));
        }
        let label = parse_u32(&record[3], "label", source, line)?;
        rows.push((models.intern(model), inputs.intern(input), rank, label, line));
    }
    if rows.is_empty() {
        return Err(parse_err(source, 1, "no prediction rows"));
    }

    let k = rows.iter().map(|r| r.2).max().unwrap_or(1) as usize;
    let n_models = models.ids.len();
    let n_inputs = inputs.ids.len();
    let max_label = rows.iter().map(|r| r.3).max().unwrap_or(0);
    let num_classes = num_classes.unwrap_or((max_label + 1).max(2));

    const EMPTY: u32 = u32::MAX;
    let mut slots = vec![EMPTY; n_models * n_inputs * k];
    for &(m, x, rank, label, line) in &rows {
        let slot = &mut slots[((m as usize) * n_inputs + x as usize) * k + rank as usize - 1];
        if *slot != EMPTY {
            return Err(Error::Consistency(format!(
                "duplicate row for ({}, {}, rank {rank}) at line {line}",
                models.ids[m as usize], inputs.ids[x as usize]
            )));
        }
        *slot = label;
    }
    for (cell, ranks) in slots.chunks_exact(k).enumerate() {
        let filled = ranks.iter().filter(|&&l| l != EMPTY).count();
        if filled < k {
            let (m, x) = (cell / n_inputs, cell % n_inputs);
            let what = if filled == 0 {
                "missing cell".to_string()
            } else {
                format!("ragged depth: {filled} of {k} ranks present")
            };
            return Err(Error::Consistency(format!(
                "{what} for ({}, {})",
                models.ids[m], inputs.ids[x]
            )));
        }
    }

    let columns = slots
        .chunks_exact(n_inputs * k)
        .map(|c| c.iter().map(|&l| ClassLabel(l)).collect())
        .collect();
    PredictionTable::from_parts(TableParts {
        models: models.ids,
        inputs: inputs.ids,
        k,
        num_classes,
        columns,
        ground_truth: Vec::new(),
    })
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<(String, ClassLabel)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(File::open(path)?));
    check_header(&mut rdr, path, &TRUTH_HEADER)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 fields, found {}", record.len())));
        }
        out.push((
            record[0].trim().to_string(),
            ClassLabel(parse_u32(&record[1], "label", path, line)?),
        ));
    }
    Ok(out)
}

pub fn save_ground_truth(table: &PredictionTable, path: &Path) -> Result<()> {
    let labels = table.ground_truth_labels()?;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", TRUTH_HEADER.join(","))?;
    for (input, label) in table.inputs().iter().zip(labels) {
        writeln!(out, "{input},{label}")?;
    }
    out.flush()?;
    Ok(())
}

fn attach_ground_truth(
    table: PredictionTable,
    truth: Vec<(String, ClassLabel)>,
    infer_classes: bool,
) -> Result<PredictionTable> {
    let mut num_classes = table.num_classes();
    if infer_classes {
        num_classes = truth.iter().map(|(_, l)| l.0 + 1).fold(num_classes, u32::max);
    }
    let mut gt = vec![None; table.n_inputs()];
    for (input, label) in truth {
        let x = table
            .input_idx(&input)
            .map_err(|_| Error::Consistency(format!("ground truth names unknown input `{input}`")))?;
        if gt[x].replace(label).is_some() {
            return Err(Error::Consistency(format!("duplicate ground truth for `{input}`")));
        }
    }
    PredictionTable::from_parts(TableParts {
        models: table.models().to_vec(),
        inputs: table.inputs().to_vec(),
        k: table.k(),
        num_classes,
        columns: (0..table.n_models()).map(|m| table.column(m).to_vec()).collect(),
        ground_truth: gt,
    })
}

/// JSON mirror of the CSV format.
#[derive(Serialize, Deserialize)]
struct JsonTable {
    k: usize,
    num_classes: u32,
    models: Vec<String>,
    inputs: Vec<String>,
    /// `predictions[m][x]` is the top-k list.
    predictions: Vec<Vec<Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<Vec<Option<u32>>>,
}

impl From<&PredictionTable> for JsonTable {
    fn from(t: &PredictionTable) -> Self {
        Self {
            k: t.k(),
            num_classes: t.num_classes(),
            models: t.models().to_vec(),
            inputs: t.inputs().to_vec(),
            predictions: (0..t.n_models())
                .map(|m| {
                    (0..t.n_inputs())
                        .map(|x| t.output(m, x).iter().map(|l| l.0).collect())
                        .collect()
                })
                .collect(),
            ground_truth: (0..t.n_inputs())
                .any(|x| t.ground_truth(x).is_some())
                .then(|| (0..t.n_inputs()).map(|x| t.ground_truth(x).map(|l| l.0)).collect()),
        }
    }
}

fn read_table_json<R: Read>(reader: R, num_classes: Option<u32>) -> Result<PredictionTable> {
    let jt: JsonTable = serde_json::from_reader(reader)?;
    let mut columns = Vec::with_capacity(jt.models.len());
    for (m, rows) in jt.predictions.into_iter().enumerate() {
        if rows.len() != jt.inputs.len() {
            return Err(Error::Consistency(format!(
                "model #{m} lists {} cells for {} inputs",
                rows.len(),
                jt.inputs.len()
            )));
        }
        let mut column = Vec::with_capacity(rows.len() * jt.k);
        for (x, cell) in rows.into_iter().enumerate() {
            if cell.len() != jt.k {
                return Err(Error::Consistency(format!(
                    "ragged depth: model #{m}, input #{x} has {} ranks, k={}",
                    cell.len(),
                    jt.k
                )));
            }
            column.extend(cell.into_iter().map(ClassLabel));
        }
        columns.push(column);
    }
    PredictionTable::from_parts(TableParts {
        models: jt.models,
        inputs: jt.inputs,
        k: jt.k,
        num_classes: num_classes.unwrap_or(jt.num_classes),
        columns,
        ground_truth: jt
            .ground_truth
            .map(|g| g.into_iter().map(|l| l.map(ClassLabel)).collect())
            .unwrap_or_default(),
    })
}
