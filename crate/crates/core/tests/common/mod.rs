#![allow(dead_code)]

use diagflow::bench::{sample_dtlz2_stratified, Dataset, Dtlz2Config, NormStats};
use diagflow::eval::OracleForward;
use diagflow::matrix::Matrix;

/// Normalized DTLZ2 training split, held-out targets in the same
/// normalized label space, and the matching analytic oracle.
pub struct Split {
    pub train: Dataset,
    pub stats: NormStats,
    pub test_labels: Matrix,
    pub oracle: OracleForward,
}

pub fn dtlz2_split(design_dim: usize, n_train: usize, n_test: usize, train_seed: u64, test_seed: u64) -> Split {
    let cfg = Dtlz2Config::new(design_dim);
    let raw = sample_dtlz2_stratified(&cfg, n_train, train_seed).unwrap();
    let stats = NormStats::fit(&raw);
    let train = raw.normalize(&stats).unwrap();
    let test = sample_dtlz2_stratified(&cfg, n_test, test_seed).unwrap();
    let test_labels = stats.normalize_labels(&test.y).unwrap();
    let oracle = OracleForward::Dtlz2 {
        objectives: cfg.label_dim,
        stats: Some(stats.clone()),
    };
    Split {
        train,
        stats,
        test_labels,
        oracle,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
