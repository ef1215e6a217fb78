//! From a JSON experiment description to ready-to-run session data:
//! load or synthesise rows, shuffle, split, encode with training-split
//! statistics, partition, and optionally pre-train the active party.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    encode, load_csv, presets, split_ids, synth_generate, vertical_split, DataError, PartitionSpec, Schema,
};
use crate::model::{pretrain_active, ModelError, PretrainConfig};
use crate::protocol::{Mode, SessionConfig, SessionData};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Built-in preset: `banking`, `adult` or `taobao`. Supplies the schema
    /// and partition unless `schema_path` / `partition_path` are given.
    pub dataset: String,
    /// CSV with a header row. Synthetic rows are generated when absent.
    pub data_path: Option<PathBuf>,
    pub schema_path: Option<PathBuf>,
    pub partition_path: Option<PathBuf>,
    /// Synthetic row count; defaults to the preset's row count.
    pub synthetic_rows: Option<usize>,
    /// Passive parties, split evenly over the preset's clusters.
    pub parties: u16,
    pub train_fraction: f64,
    pub rounds: usize,
    /// Testing batches to run; the whole test split when absent.
    pub test_batches: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(alias = "K")]
    pub rotation_period: u32,
    pub mode: Mode,
    pub seed: u64,
    pub hidden: usize,
    pub scale_bits: u32,
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SessionConfig::default();
        ExperimentConfig {
            dataset: "banking".into(),
            data_path: None,
            schema_path: None,
            partition_path: None,
            synthetic_rows: None,
            parties: 4,
            train_fraction: 0.8,
            rounds: 5,
            test_batches: None,
            batch_size: s.batch_size,
            lr: s.lr,
            rotation_period: s.rotation_period,
            mode: s.mode,
            seed: s.seed,
            hidden: s.hidden,
            scale_bits: s.scale_bits,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data_path, &mut cfg.schema_path, &mut cfg.partition_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            rotation_period: self.rotation_period,
            mode: self.mode,
            seed: self.seed,
            hidden: self.hidden,
            scale_bits: self.scale_bits,
        }
    }

    /// Test IDs the configured number of testing batches covers.
    pub fn test_slice<'a>(&self, test_ids: &'a [u64]) -> &'a [u64] {
        match self.test_batches {
            Some(k) => &test_ids[..test_ids.len().min(k * self.batch_size)],
            None => test_ids,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: SessionData,
    /// Active width, then one width per cluster.
    pub widths: Vec<usize>,
    pub rows: usize,
    /// `csv:<path>` or `synthetic`.
    pub source: String,
    pub pretrain_accuracy: Option<f64>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let preset = presets::by_name(&cfg.dataset);
    let schema = match (&cfg.schema_path, &preset) {
        (Some(p), _) => Schema::from_json(p)?,
        (None, Some(pr)) => pr.schema.clone(),
        (None, None) => {
            return Err(ExperimentError::Config(format!(
                "unknown dataset {:?} and no schema_path given",
                cfg.dataset
            )))
        }
    };
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
        return Err(ExperimentError::Config("train_fraction must be in (0, 1]".into()));
    }

    let (raw, source) = match &cfg.data_path {
        Some(p) => {
            if !p.exists() {
                return Err(ExperimentError::Config(format!("data_path {} does not exist", p.display())));
            }
            (load_csv(p, &schema)?, format!("csv:{}", p.display()))
        }
        None => {
            let rows = cfg.synthetic_rows.or(preset.as_ref().map(|p| p.rows)).unwrap_or(10_000);
            (synth_generate(rows, &schema, cfg.seed), "synthetic".to_string())
        }
    };
    let raw = raw.shuffled(cfg.seed);
    let n = raw.n_rows();
    let (train_ids, test_ids) = split_ids(n, cfg.train_fraction);
    let train_rows: Vec<usize> = train_ids.iter().map(|&i| i as usize).collect();
    let encoded = encode(&raw, &schema, Some(&train_rows))?;

    let partition = match (&cfg.partition_path, &preset) {
        (Some(p), _) => PartitionSpec::from_json(p)?,
        (None, Some(pr)) => {
            let k = pr.clusters.len() as u16;
            if cfg.parties == 0 || cfg.parties % k != 0 {
                return Err(ExperimentError::Config(format!(
                    "parties = {} does not split evenly over {k} clusters",
                    cfg.parties
                )));
            }
            let clusters: Vec<&[&str]> = pr.clusters.iter().map(|c| c.as_slice()).collect();
            PartitionSpec::even_split(&pr.active_columns, &clusters, cfg.parties / k, n as u64)
        }
        (None, None) => return Err(ExperimentError::Config("no partition_path given".into())),
    };
    let mut shards = vertical_split(&encoded, &partition)?;

    let mut pretrain_accuracy = None;
    if cfg.pretrain.mode != crate::model::PretrainMode::Identity {
        let x = shards.active.features.select(Axis(0), &train_rows);
        let y: Vec<f64> = train_rows.iter().map(|&r| shards.labels[r]).collect();
        let fit = pretrain_active(x.view(), &y, &cfg.pretrain)?;
        pretrain_accuracy = fit.train_accuracy;
        shards.active.features = fit.embed(shards.active.features.view());
        shards.active.columns = (0..shards.active.features.ncols()).collect();
    }

    let mut widths = vec![shards.active.features.ncols()];
    for c in &partition.clusters {
        if let Some(s) = shards.passive.iter().find(|s| s.cluster == Some(c.cluster_id)) {
            widths.push(s.features.ncols());
        }
    }
    Ok(Prepared {
        data: SessionData {
            shards,
            train_ids,
            test_ids,
        },
        widths,
        rows: n,
        source,
        pretrain_accuracy,
    })
}
