use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PredictionTable;
use crate::error::{Error, Result};

/// How families are spanned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyFlavor {
    /// F(m): a vanilla model and every variant derived from it.
    #[serde(rename = "vanilla")]
    VanillaSpan,
    /// F(m, Psi): the variants of m obtained by one procedure.
    #[serde(rename = "variation")]
    VariationSpan,
    /// F(m, {theta}): a single model.
    #[serde(rename = "singleton")]
    Singleton,
}

impl FamilyFlavor {
    pub const ALL: [FamilyFlavor; 3] = [Self::VanillaSpan, Self::VariationSpan, Self::Singleton];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::VanillaSpan => "vanilla",
            Self::VariationSpan => "variation",
            Self::Singleton => "singleton",
        }
    }
}

impl fmt::Display for FamilyFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FamilyFlavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" | "vanilla-span" => Ok(Self::VanillaSpan),
            "variation" | "variation-span" => Ok(Self::VariationSpan),
            "singleton" => Ok(Self::Singleton),
            other => Err(Error::Config(format!(
                "unknown family flavor `{other}` (expected vanilla, variation or singleton)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub id: String,
    pub members: Vec<String>,
}

/// Pairwise-disjoint grouping of model ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyPartition {
    flavor: FamilyFlavor,
    families: Vec<Family>,
}

impl FamilyPartition {
    pub fn new(flavor: FamilyFlavor, families: Vec<Family>) -> Result<Self> {
        let mut seen_ids = HashSet::new();
        let mut seen_models = HashSet::new();
        for family in &families {
            if family.members.is_empty() {
                return Err(Error::Consistency(format!("family `{}` is empty", family.id)));
            }
            if !seen_ids.insert(family.id.as_str()) {
                return Err(Error::Consistency(format!("family id `{}` repeated", family.id)));
            }
            for m in &family.members {
                if !seen_models.insert(m.as_str()) {
                    return Err(Error::Consistency(format!("model `{m}` belongs to two families")));
                }
            }
        }
        Ok(Self { flavor, families })
    }

    pub fn flavor(&self) -> FamilyFlavor {
        self.flavor
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn family(&self, id: &str) -> Option<&Family> {
        self.families.iter().find(|f| f.id == id)
    }

    pub fn family_of(&self, model: &str) -> Option<&Family> {
        self.families.iter().find(|f| f.members.iter().any(|m| m == model))
    }

    /// Member indices per family; fails when a member is not in the table.
    pub fn resolve(&self, table: &PredictionTable) -> Result<Vec<Vec<usize>>> {
        self.families
            .iter()
            .map(|f| table.model_indices(&f.members))
            .collect()
    }

    pub fn covers(&self, table: &PredictionTable) -> bool {
        let covered: usize = self.families.iter().map(|f| f.members.len()).sum();
        covered == table.n_models() && self.resolve(table).is_ok()
    }

    /// Reads `family,model` rows.
    pub fn load_csv(path: &Path, flavor: FamilyFlavor) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let header = rdr.headers()?.clone();
        if header.len() != 2 || &header[0] != "family" || &header[1] != "model" {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "expected header `family,model`".into(),
            });
        }
        let mut families: Vec<Family> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let (fid, model) = (record[0].trim(), record[1].trim());
            match families.iter_mut().find(|f| f.id == fid) {
                Some(f) => f.members.push(model.to_string()),
                None => families.push(Family {
                    id: fid.to_string(),
                    members: vec![model.to_string()],
                }),
            }
        }
        Self::new(flavor, families)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "family,model")?;
        for f in &self.families {
            for m in &f.members {
                writeln!(out, "{},{m}", f.id)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads a model-id list, one per line; blank lines and `#` comments skipped.
pub fn load_model_list(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}
