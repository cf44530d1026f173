use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::record::RunRecord;
use super::run::run_from_root;
use crate::error::{Error, Result};

/// Outcome of one configuration in a matrix.
#[derive(Debug)]
pub struct MatrixRun {
    pub run_id: String,
    pub result: Result<RunRecord>,
}

/// Final test accuracy of a group of runs that differ only in seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub runs: usize,
    pub test_acc_mean: f64,
    pub test_acc_min: f64,
    pub test_acc_max: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

/// Group label: the run id without its `-s<seed>` suffix.
fn group_of(record: &RunRecord) -> String {
    let suffix = format!("-s{}", record.config.seed);
    record
        .run_id
        .strip_suffix(&suffix)
        .unwrap_or(&record.run_id)
        .to_string()
}

/// Summarizes records grouped by run id without the seed suffix. Records
/// without epochs are skipped; groups come out sorted.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.final_epoch().is_some()) {
        groups.entry(group_of(r)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(group, rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.final_epoch().unwrap().test_acc).collect();
            let last = rs[0].final_epoch().unwrap();
            SummaryRow {
                group,
                runs: rs.len(),
                test_acc_mean: acc.iter().sum::<f64>() / acc.len() as f64,
                test_acc_min: acc.iter().copied().fold(f64::INFINITY, f64::min),
                test_acc_max: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                trainable_params: last.trainable_params,
                total_params: last.total_params,
            }
        })
        .collect()
}

/// Writes `rows` as CSV with a header, also when empty.
pub fn write_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::format(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(!rows.is_empty())
        .from_path(path)
        .map_err(err)?;
    if rows.is_empty() {
        w.write_record([
            "group",
            "runs",
            "test_acc_mean",
            "test_acc_min",
            "test_acc_max",
            "trainable_params",
            "total_params",
        ])
        .map_err(err)?;
    }
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every configuration in turn. A failing run is logged and reported
/// in its [`MatrixRun`] without stopping the others. The summary over the
/// successful runs is written to `out_dir/summary.csv`.
pub fn run_matrix(configs: &[RunConfig], data_root: &Path, out_dir: &Path) -> Result<(Vec<MatrixRun>, Vec<SummaryRow>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut runs = Vec::with_capacity(configs.len());
    for config in configs {
        let run_id = config.run_id();
        let result = run_from_root(config, data_root, Some(out_dir));
        if let Err(e) = &result {
            warn!("run {run_id} failed: {e}");
        }
        runs.push(MatrixRun { run_id, result });
    }
    let ok: Vec<RunRecord> = runs.iter().filter_map(|r| r.result.as_ref().ok().cloned()).collect();
    let summary = summarize(&ok);
    write_summary(&summary, out_dir.join("summary.csv"))?;
    Ok((runs, summary))
}
