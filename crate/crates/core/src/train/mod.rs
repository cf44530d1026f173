//! Training runs, seed matrices and their records.

mod config;
mod matrix;
mod record;
mod run;

pub use config::{LrStep, RunConfig, TraceConfig};
pub use matrix::{run_matrix, summarize, write_summary, MatrixRun, SummaryRow};
pub use record::{DimRecord, EpochRecord, RecordMeta, RunRecord, RECORD_SCHEMA_VERSION};
pub use run::{evaluate, measure_effective_dims, prepare_data, run, run_from_root, train};
