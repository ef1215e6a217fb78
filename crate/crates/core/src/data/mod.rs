//! Dataset ingestion, categorical encoding and vertical partitioning.

mod partition;
pub mod presets;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use partition::{
    reassemble, vertical_split, ClusterSpec, IdRange, MemberSpec, PartitionSpec, PartyShard, Shards,
};
pub use synth::synth_generate;

/// Bucket for categorical values outside a declared level list. It encodes
/// as an all-zero one-hot row.
pub const OTHER: &str = "other";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("cannot parse row {row}, column {column:?}: {value:?}")]
    ParseError {
        row: usize,
        column: String,
        value: String,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("overlapping partition: {0}")]
    OverlapError(String),

    #[error("partition coverage: {0}")]
    CoverageError(String),

    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ColumnKind {
    Categorical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        categories: Option<Vec<String>>,
    },
    Numeric {
        /// Only used by the synthetic generator.
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        std: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical {
                categories: Some(categories.iter().map(|s| s.to_string()).collect()),
            },
        }
    }

    pub fn numeric(name: &str, mean: f64, std: f64) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Numeric { mean, std },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub name: String,
    /// Raw values that map to label 1; everything else is 0.
    pub positive: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    pub label: LabelSpec,
    /// Field delimiter; guessed from the header line when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter: Option<char>,
}

impl Schema {
    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn from_json(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawValues {
    Categorical(Vec<String>),
    Numeric(Vec<f64>),
}

impl RawValues {
    fn len(&self) -> usize {
        match self {
            RawValues::Categorical(v) => v.len(),
            RawValues::Numeric(v) => v.len(),
        }
    }

    fn permuted(&self, order: &[usize]) -> RawValues {
        match self {
            RawValues::Categorical(v) => RawValues::Categorical(order.iter().map(|&i| v[i].clone()).collect()),
            RawValues::Numeric(v) => RawValues::Numeric(order.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub values: RawValues,
}

/// Typed columns in schema order plus binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub columns: Vec<RawColumn>,
    pub labels: Vec<f64>,
}

impl RawDataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    /// Rows reordered by a seeded permutation; row `i` of the result gets sample ID `i`.
    pub fn shuffled(&self, seed: u64) -> RawDataset {
        let mut order: Vec<usize> = (0..self.n_rows()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        RawDataset {
            columns: self
                .columns
                .iter()
                .map(|c| RawColumn {
                    name: c.name.clone(),
                    values: c.values.permuted(&order),
                })
                .collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn write_csv(&self, schema: &Schema, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        header.push(&schema.label.name);
        w.write_record(&header)?;
        let negative = "0".to_string();
        let positive = schema.label.positive.first().cloned().unwrap_or_else(|| "1".into());
        for r in 0..self.n_rows() {
            let mut rec: Vec<String> = self
                .columns
                .iter()
                .map(|c| match &c.values {
                    RawValues::Categorical(v) => v[r].clone(),
                    RawValues::Numeric(v) => format!("{}", v[r]),
                })
                .collect();
            rec.push(if self.labels[r] > 0.5 { positive.clone() } else { negative.clone() });
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn guess_delimiter(path: &Path) -> Result<u8, DataError> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().unwrap_or("");
    Ok(if header.matches(';').count() > header.matches(',').count() {
        b';'
    } else {
        b','
    })
}

/// Reads a headered CSV. Columns not named in the schema are ignored.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawDataset, DataError> {
    let delimiter = match schema.delimiter {
        Some(c) => c as u8,
        None => guess_delimiter(path)?,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim_matches('"').to_string()).collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(DataError::SchemaMismatch("file has no header".into()));
    }
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::SchemaMismatch(format!("column {name:?} missing from header")))
    };
    let label_pos = position(&schema.label.name)?;
    let positions: Vec<usize> = schema.columns.iter().map(|c| position(&c.name)).collect::<Result<_, _>>()?;

    let mut columns: Vec<RawColumn> = schema
        .columns
        .iter()
        .map(|c| RawColumn {
            name: c.name.clone(),
            values: match c.kind {
                ColumnKind::Categorical { .. } => RawValues::Categorical(Vec::new()),
                ColumnKind::Numeric { .. } => RawValues::Numeric(Vec::new()),
            },
        })
        .collect();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim_matches('"');
        for ((col, spec), &pos) in columns.iter_mut().zip(&schema.columns).zip(&positions) {
            let raw = field(pos);
            match (&mut col.values, &spec.kind) {
                (RawValues::Categorical(v), ColumnKind::Categorical { categories }) => {
                    let known = categories.as_ref().map_or(true, |cs| cs.iter().any(|c| c == raw));
                    v.push(if known { raw.to_string() } else { OTHER.to_string() });
                }
                (RawValues::Numeric(v), _) => v.push(raw.parse().map_err(|_| DataError::ParseError {
                    row,
                    column: spec.name.clone(),
                    value: raw.to_string(),
                })?),
                _ => unreachable!("column storage follows schema kind"),
            }
        }
        let y = field(label_pos);
        labels.push(schema.label.positive.iter().any(|p| p == y) as u8 as f64);
    }
    if labels.is_empty() {
        return Err(DataError::SchemaMismatch("file contains no rows".into()));
    }
    Ok(RawDataset { columns, labels })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub sample_ids: Vec<u64>,
    /// `[n_rows × width]`
    pub matrix: Array2<f64>,
    pub column_map: Vec<ColumnRange>,
    pub labels: Vec<f64>,
}

impl EncodedDataset {
    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn range(&self, name: &str) -> Option<&ColumnRange> {
        self.column_map.iter().find(|r| r.name == name)
    }

    /// Encoded column indices for the named raw columns, in encoded order.
    pub fn columns_of(&self, names: &[String]) -> Result<Vec<usize>, DataError> {
        let mut cols = Vec::new();
        for n in names {
            let r = self
                .range(n)
                .ok_or_else(|| DataError::CoverageError(format!("unknown column {n:?}")))?;
            cols.extend(r.start..r.end);
        }
        cols.sort_unstable();
        Ok(cols)
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        // IDs are dense and assigned in row order.
        let i = id as usize;
        (self.sample_ids.get(i) == Some(&id)).then_some(i)
    }
}

/// Levels of a categorical column: the declared list, else the sorted
/// distinct observed values.
fn levels(spec: Option<&Vec<String>>, values: &[String]) -> Vec<String> {
    match spec {
        Some(cs) => cs.clone(),
        None => values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
    }
}

/// One-hot categoricals, z-scored numerics. Statistics come from
/// `stats_rows` (the training split) when given, else all rows. Sample IDs
/// are the row indices.
pub fn encode(raw: &RawDataset, schema: &Schema, stats_rows: Option<&[usize]>) -> Result<EncodedDataset, DataError> {
    let n = raw.n_rows();
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let all: Vec<usize> = (0..n).collect();
    let stats_rows = stats_rows.unwrap_or(&all);

    let mut blocks: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for spec in &schema.columns {
        let col = raw
            .columns
            .iter()
            .find(|c| c.name == spec.name)
            .ok_or_else(|| DataError::SchemaMismatch(format!("raw data lacks column {:?}", spec.name)))?;
        if col.values.len() != n {
            return Err(DataError::SchemaMismatch(format!("column {:?} has wrong length", spec.name)));
        }
        let cols = match (&col.values, &spec.kind) {
            (RawValues::Categorical(v), ColumnKind::Categorical { categories }) => {
                let lv = levels(categories.as_ref(), v);
                let index: BTreeMap<&str, usize> = lv.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
                let mut cols = vec![vec![0.0; n]; lv.len()];
                for (r, val) in v.iter().enumerate() {
                    if let Some(&j) = index.get(val.as_str()) {
                        cols[j][r] = 1.0;
                    }
                }
                cols
            }
            (RawValues::Numeric(v), ColumnKind::Numeric { .. }) => {
                let m = stats_rows.len().max(1) as f64;
                let mean = stats_rows.iter().map(|&r| v[r]).sum::<f64>() / m;
                let var = stats_rows.iter().map(|&r| (v[r] - mean).powi(2)).sum::<f64>() / m;
                let sd = var.sqrt();
                let z = if sd > 1e-12 {
                    v.iter().map(|x| (x - mean) / sd).collect()
                } else {
                    vec![0.0; n]
                };
                vec![z]
            }
            _ => return Err(DataError::SchemaMismatch(format!("column {:?} has the wrong type", spec.name))),
        };
        blocks.push((spec.name.clone(), cols));
    }

    let width: usize = blocks.iter().map(|(_, c)| c.len()).sum();
    let mut matrix = Array2::zeros((n, width));
    let mut column_map = Vec::with_capacity(blocks.len());
    let mut start = 0;
    for (name, cols) in blocks {
        for (j, col) in cols.iter().enumerate() {
            matrix.column_mut(start + j).assign(&ndarray::ArrayView1::from(col.as_slice()));
        }
        column_map.push(ColumnRange {
            name,
            start,
            end: start + cols.len(),
        });
        start += cols.len();
    }
    Ok(EncodedDataset {
        sample_ids: (0..n as u64).collect(),
        matrix,
        column_map,
        labels: raw.labels.clone(),
    })
}

/// First `train_fraction` of the (already shuffled) IDs train, the rest test.
pub fn split_ids(n: usize, train_fraction: f64) -> (Vec<u64>, Vec<u64>) {
    let cut = ((n as f64) * train_fraction).round() as usize;
    let cut = cut.clamp(usize::from(n > 0), n);
    ((0..cut as u64).collect(), (cut as u64..n as u64).collect())
}
