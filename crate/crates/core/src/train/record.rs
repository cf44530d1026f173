use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};

/// Version of the CSV layouts written by this module.
pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// One row of `record.csv`.
///
/// Header: `epoch,train_loss,train_acc,val_acc,test_acc,trainable_params,
/// total_params,learning_rate,transformed`. `epoch` counts from 1,
/// `val_acc` is empty without a validation split, `transformed` is 1 for
/// epochs trained after the transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub learning_rate: f64,
    pub transformed: u8,
}

/// One row of `dims.csv`: `epoch,layer,width,effective_dim,train_acc,val_acc`.
/// Epoch 0 is the untrained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimRecord {
    pub epoch: usize,
    pub layer: String,
    pub width: usize,
    pub effective_dim: usize,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Everything measured in one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub epochs: Vec<EpochRecord>,
    pub dims: Vec<DimRecord>,
    /// Epoch after which the plan was applied.
    pub transform_epoch: Option<usize>,
    /// `m_e` chosen for each input-transformed layer.
    pub effective_dims: BTreeMap<String, usize>,
    /// Seconds spent in each epoch.
    pub wall_time: Vec<f64>,
}

/// Structured metadata written next to the CSVs. Timings live here so
/// the CSVs of seeded runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub schema_version: u32,
    pub run_id: String,
    pub transform_epoch: Option<usize>,
    pub effective_dims: BTreeMap<String, usize>,
    pub wall_time: Vec<f64>,
    pub config: RunConfig,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(format!("{}: {e}", path.display()))
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(!rows.is_empty())
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        w.write_record(header).map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

const EPOCH_HEADER: &[&str] = &[
    "epoch",
    "train_loss",
    "train_acc",
    "val_acc",
    "test_acc",
    "trainable_params",
    "total_params",
    "learning_rate",
    "transformed",
];
const DIM_HEADER: &[&str] = &["epoch", "layer", "width", "effective_dim", "train_acc", "val_acc"];

impl RunRecord {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn meta(&self) -> RecordMeta {
        RecordMeta {
            schema_version: RECORD_SCHEMA_VERSION,
            run_id: self.run_id.clone(),
            transform_epoch: self.transform_epoch,
            effective_dims: self.effective_dims.clone(),
            wall_time: self.wall_time.clone(),
            config: self.config.clone(),
        }
    }

    /// Writes `record.csv`, `dims.csv` and `record.toml` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("record.csv"), &self.epochs, EPOCH_HEADER)?;
        write_csv(&dir.join("dims.csv"), &self.dims, DIM_HEADER)?;
        let meta = toml::to_string(&self.meta()).map_err(|e| Error::format(e.to_string()))?;
        let p = dir.join("record.toml");
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }

    /// Reads a directory written by [`RunRecord::save`], refusing other
    /// schema versions.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("record.toml");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: RecordMeta = toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", p.display())))?;
        if meta.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::format(format!(
                "{}: record schema version {} (this build reads {RECORD_SCHEMA_VERSION})",
                p.display(),
                meta.schema_version
            )));
        }
        Ok(Self {
            run_id: meta.run_id,
            config: meta.config,
            epochs: read_csv(&dir.join("record.csv"))?,
            dims: read_csv(&dir.join("dims.csv"))?,
            transform_epoch: meta.transform_epoch,
            effective_dims: meta.effective_dims,
            wall_time: meta.wall_time,
        })
    }
}
