//! Datasets, CSV ingestion, splitting and the synthetic generator.

mod dataset;
mod ingest;
mod split;
mod synth;

pub use dataset::{ColumnScale, Dataset, FeatureGroup};
pub use ingest::{load_csv, read_csv, standardize_params, CsvSchema, VARIANCE_FLOOR};
pub use split::{split, Split};
pub use synth::{synth_generate, SynthConfig};
