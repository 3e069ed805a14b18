//! DTLZ2 benchmark and tabular dataset handling.

mod dataset;
mod dtlz2;

pub use dataset::{ColumnNames, ColumnRange, ColumnRole, Dataset, DatasetSchema, NormStats};
pub use dtlz2::{dirichlet_sample, dtlz2_forward, dtlz2_g, sample_dtlz2_stratified, Dtlz2Config};
