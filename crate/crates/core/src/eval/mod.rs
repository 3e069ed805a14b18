//! Evaluation metrics and experiment drivers.

mod ablation;
mod metrics;
mod ood;
pub mod stats;
mod tasks;

pub use ablation::{permutation_ablation, train_and_round_trip, AblationConfig, AblationReport, AblationRow, Ordering, SpreadSummary};
pub use metrics::{
    design_diversity, diversity_of_groups, diversity_vs_epsilon, diversity_vs_epsilon_from, forward_mse, generate_candidates,
    round_trip_error, EpsilonPoint, ForwardMse, RoundTrip,
};
pub use ood::{generate_ood_targets, nn_distances, ood_detection, OodConfig, OodMetric, OodSet, MAX_GRID_LABEL_DIM};
pub use stats::{pearson, roc_auc, roc_points};
pub use tasks::{
    candidate_pool, error_rejection, rejection_count, select_best, RANDOM_SHUFFLES, CandidatePool, MetricRejection, MetricSelection, RejectionCurve,
    SelectBest,
};

use crate::bench::{dtlz2_forward, NormStats};
use crate::error::{check_dim, Result};
use crate::flow::{FlowModel, VelocityField};
use crate::inn::InnModel;
use crate::matrix::Matrix;
use crate::nn::MlpModel;
use crate::ode::{analyze, synthesize};

/// A model that maps labels to designs and designs to labels.
pub trait InverseModel {
    fn design_dim(&self) -> usize;
    fn label_dim(&self) -> usize;
    /// Designs for `y_star`; row `i` uses random stream `i` of `seed`.
    fn generate(&self, y_star: &Matrix, cond: Option<&Matrix>, seed: u64) -> Result<Matrix>;
    fn predict(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<Matrix>;
}

impl InverseModel for FlowModel {
    fn design_dim(&self) -> usize {
        self.dims().design_dim
    }

    fn label_dim(&self) -> usize {
        self.dims().label_dim
    }

    fn generate(&self, y_star: &Matrix, cond: Option<&Matrix>, seed: u64) -> Result<Matrix> {
        Ok(synthesize(self, y_star, None, cond, seed)?.x)
    }

    fn predict(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        Ok(analyze(self, x, cond)?.y_hat)
    }
}

impl InverseModel for InnModel {
    fn design_dim(&self) -> usize {
        self.dims().design_dim
    }

    fn label_dim(&self) -> usize {
        self.dims().label_dim
    }

    fn generate(&self, y_star: &Matrix, cond: Option<&Matrix>, seed: u64) -> Result<Matrix> {
        InnModel::generate(self, y_star, cond, seed)
    }

    fn predict(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        InnModel::predict(self, x, cond)
    }
}

/// Ground-truth forward function used to score generated designs.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleForward {
    /// Analytic DTLZ2. With `stats`, designs and labels live in the
    /// normalized space of a dataset and are mapped through it.
    Dtlz2 { objectives: usize, stats: Option<NormStats> },
    /// A trained network on `[x; cond]`, in the model's own label space.
    Surrogate(MlpModel),
}

/// Oracle labels plus the number of designs that had to be clipped into
/// the oracle's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub labels: Matrix,
    pub clipped: usize,
}

/// Ground-truth labels for designs.
pub trait Oracle {
    fn label_dim(&self) -> usize;
    fn evaluate(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<OracleOutput>;
}

impl Oracle for OracleForward {
    fn label_dim(&self) -> usize {
        match self {
            OracleForward::Dtlz2 { objectives, .. } => *objectives,
            OracleForward::Surrogate(m) => m.output_dim(),
        }
    }

    fn evaluate(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<OracleOutput> {
        match self {
            OracleForward::Dtlz2 { objectives, stats } => {
                let mut raw = match stats {
                    Some(s) => s.denormalize_design(x)?,
                    None => x.clone(),
                };
                let mut clipped = 0;
                let mut labels = Matrix::zeros(x.rows(), *objectives);
                for r in 0..raw.rows() {
                    let row = raw.row_mut(r);
                    if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        clipped += 1;
                        for v in row.iter_mut() {
                            *v = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
                        }
                    }
                    let f = dtlz2_forward(row, *objectives)?;
                    labels.row_mut(r).copy_from_slice(&f);
                }
                let labels = match stats {
                    Some(s) => s.normalize_labels(&labels)?,
                    None => labels,
                };
                Ok(OracleOutput { labels, clipped })
            }
            OracleForward::Surrogate(net) => {
                let input = match cond {
                    Some(c) if c.cols() > 0 => Matrix::hcat(&[x, c])?,
                    _ => x.clone(),
                };
                check_dim("surrogate input width", net.input_dim(), input.cols())?;
                Ok(OracleOutput {
                    labels: net.forward(&input)?,
                    clipped: 0,
                })
            }
        }
    }
}
