//! CSV ingestion.
//!
//! The schema config is a small TOML file:
//!
//! ```toml
//! response = "sales"
//! delimiter = ","
//!
//! [[fields]]
//! name = "store"
//! kind = "categorical"
//! levels = ["s1", "s2"]   # optional; learned from the data when omitted
//!
//! [[fields]]
//! name = "price"
//! kind = "continuous"
//! ```
//!
//! Learned level dictionaries are sorted lexicographically. When levels are
//! declared, any other level in the file is an unseen-level error.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::schema::{Covariate, Field, FieldKind, FieldSchema};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKindSpec {
    Categorical,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKindSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub response: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    pub fields: Vec<FieldSpec>,
}

fn default_delimiter() -> String {
    ",".into()
}

impl SchemaConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Config describing an existing schema with all levels pinned.
    pub fn from_schema(schema: &FieldSchema, response: &str, delimiter: u8) -> Self {
        SchemaConfig {
            response: response.to_string(),
            delimiter: (delimiter as char).to_string(),
            fields: schema
                .fields()
                .iter()
                .map(|f| match &f.kind {
                    FieldKind::Categorical { levels } => FieldSpec {
                        name: f.name.clone(),
                        kind: FieldKindSpec::Categorical,
                        levels: Some(levels.clone()),
                    },
                    FieldKind::Continuous => FieldSpec {
                        name: f.name.clone(),
                        kind: FieldKindSpec::Continuous,
                        levels: None,
                    },
                })
                .collect(),
        }
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        let d = match self.delimiter.as_str() {
            "\\t" | "tab" => "\t",
            d => d,
        };
        match d.as_bytes() {
            [b] => Ok(*b),
            _ => Err(Error::Config(format!(
                "delimiter must be one byte, got {:?}",
                self.delimiter
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BadRowPolicy {
    #[default]
    Error,
    Skip,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based data row (the header is not counted).
    pub row: usize,
    pub column: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rejected: Vec<Rejection>,
}

pub fn csv_ingest(
    path: &Path,
    config: &SchemaConfig,
    policy: BadRowPolicy,
) -> Result<(Dataset, IngestReport)> {
    let f = std::fs::File::open(path)?;
    csv_ingest_reader(std::io::BufReader::new(f), config, policy)
}

enum Cell {
    Level(String),
    Value(f64),
}

pub fn csv_ingest_reader<R: Read>(
    reader: R,
    config: &SchemaConfig,
    policy: BadRowPolicy,
) -> Result<(Dataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(config.delimiter_byte()?)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column {name:?} not found in header")))
    };
    let field_cols: Vec<usize> = config
        .fields
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<_>>()?;
    let response_col = col(&config.response)?;

    let declared: Vec<Option<HashMap<&str, u32>>> = config
        .fields
        .iter()
        .map(|f| {
            f.levels.as_ref().map(|ls| {
                ls.iter()
                    .enumerate()
                    .map(|(i, l)| (l.as_str(), i as u32))
                    .collect()
            })
        })
        .collect();

    let mut report = IngestReport::default();
    let mut cells: Vec<Cell> = Vec::new();
    let mut response = Vec::new();
    let mut row_cells = Vec::with_capacity(config.fields.len());
    for (idx, rec) in rdr.records().enumerate() {
        let row_no = idx + 1;
        report.rows_read += 1;
        let rec = rec?;
        row_cells.clear();
        let mut bad: Option<Rejection> = None;
        for (fi, (spec, &c)) in config.fields.iter().zip(&field_cols).enumerate() {
            let raw = rec.get(c).unwrap_or("").trim();
            match spec.kind {
                FieldKindSpec::Categorical => {
                    if raw.is_empty() {
                        bad = Some(Rejection {
                            row: row_no,
                            column: spec.name.clone(),
                            message: "empty categorical cell".into(),
                        });
                        break;
                    }
                    if let Some(dict) = &declared[fi] {
                        if !dict.contains_key(raw) {
                            return Err(Error::UnseenLevel {
                                field: spec.name.clone(),
                                level: raw.to_string(),
                            });
                        }
                    }
                    row_cells.push(Cell::Level(raw.to_string()));
                }
                FieldKindSpec::Continuous => match raw.parse::<f64>() {
                    Ok(x) if x.is_finite() => row_cells.push(Cell::Value(x)),
                    _ => {
                        bad = Some(Rejection {
                            row: row_no,
                            column: spec.name.clone(),
                            message: format!("{raw:?} is not a finite number"),
                        });
                        break;
                    }
                },
            }
        }
        let y = if bad.is_none() {
            let raw = rec.get(response_col).unwrap_or("").trim();
            match raw.parse::<f64>() {
                Ok(y) if y.is_finite() => Some(y),
                _ => {
                    bad = Some(Rejection {
                        row: row_no,
                        column: config.response.clone(),
                        message: format!("{raw:?} is not a finite number"),
                    });
                    None
                }
            }
        } else {
            None
        };
        match (bad, y) {
            (Some(r), _) => match policy {
                BadRowPolicy::Error => {
                    return Err(Error::Ingest {
                        row: r.row,
                        column: r.column,
                        message: r.message,
                    })
                }
                BadRowPolicy::Skip => report.rejected.push(r),
            },
            (None, Some(y)) => {
                cells.append(&mut row_cells);
                response.push(y);
            }
            (None, None) => unreachable!(),
        }
    }

    // Level dictionaries: declared ones as given, learned ones sorted.
    let nf = config.fields.len();
    let mut fields = Vec::with_capacity(nf);
    let mut lookups: Vec<Option<HashMap<String, u32>>> = Vec::with_capacity(nf);
    for (fi, spec) in config.fields.iter().enumerate() {
        match spec.kind {
            FieldKindSpec::Continuous => {
                fields.push(Field::continuous(spec.name.clone()));
                lookups.push(None);
            }
            FieldKindSpec::Categorical => {
                let levels: Vec<String> = match &spec.levels {
                    Some(ls) => ls.clone(),
                    None => cells
                        .iter()
                        .skip(fi)
                        .step_by(nf)
                        .filter_map(|c| match c {
                            Cell::Level(s) => Some(s.clone()),
                            Cell::Value(_) => None,
                        })
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                };
                lookups.push(Some(
                    levels
                        .iter()
                        .enumerate()
                        .map(|(i, l)| (l.clone(), i as u32))
                        .collect(),
                ));
                fields.push(Field::categorical(spec.name.clone(), levels));
            }
        }
    }
    let schema = FieldSchema::new(fields)?;
    let covariates = cells
        .into_iter()
        .enumerate()
        .map(|(i, c)| match c {
            Cell::Value(x) => Covariate::Value(x),
            Cell::Level(s) => {
                Covariate::Level(lookups[i % nf].as_ref().expect("categorical lookup")[&s])
            }
        })
        .collect();
    Ok((Dataset::new(schema, covariates, response)?, report))
}

/// Encodes a CSV against an existing schema (for scoring). Levels outside
/// the schema's dictionaries are unseen-level errors.
pub fn csv_encode(
    path: &Path,
    schema: &FieldSchema,
    response_column: &str,
    delimiter: u8,
) -> Result<Dataset> {
    let config = SchemaConfig::from_schema(schema, response_column, delimiter);
    let (d, _) = csv_ingest(path, &config, BadRowPolicy::Error)?;
    Ok(d)
}
