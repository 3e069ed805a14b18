//! Out-of-distribution target generation and detection scoring.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{roc_auc, roc_points};
use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, seeded};
use crate::uq::UqScores;

/// Largest label dimension the dense grid supports.
pub const MAX_GRID_LABEL_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OodConfig {
    pub grid_points_per_dim: usize,
    /// Grid extent in min/max-normalized label space.
    pub span: (f64, f64),
    /// Accepted nearest-neighbour distance range, inclusive.
    pub band: (f64, f64),
    pub n_in: usize,
    pub n_ood: usize,
    pub seed: u64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            grid_points_per_dim: 32,
            span: (-0.1, 1.1),
            band: (0.02, 0.08),
            n_in: 2500,
            n_ood: 2500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodSet {
    /// In-distribution targets, in the input label space.
    pub in_dist: Matrix,
    /// OOD targets, in the input label space.
    pub ood: Matrix,
    /// Normalized nearest-neighbour distance of each OOD target.
    pub distances: Vec<f64>,
    /// Grid points inside the band before subsampling.
    pub band_count: usize,
}

/// Euclidean distance from every row of `points` to its nearest row of
/// `reference`.
pub fn nn_distances(points: &Matrix, reference: &Matrix) -> Result<Vec<f64>> {
    check_dim("nn_distances width", reference.cols(), points.cols())?;
    if reference.rows() == 0 {
        return Err(Error::config("nn_distances needs a non-empty reference set"));
    }
    Ok((0..points.rows())
        .into_par_iter()
        .map(|i| {
            let p = points.row(i);
            reference
                .row_iter()
                .map(|r| r.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

struct MinMax {
    min: Vec<f64>,
    range: Vec<f64>,
}

impl MinMax {
    fn fit(m: &Matrix) -> Result<Self> {
        let mut min = Vec::with_capacity(m.cols());
        let mut range = Vec::with_capacity(m.cols());
        for c in 0..m.cols() {
            let col = m.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(Error::config(format!("label column {c} is constant; cannot normalize")));
            }
            min.push(lo);
            range.push(hi - lo);
        }
        Ok(Self { min, range })
    }

    fn forward(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| (m.get(r, c) - self.min[c]) / self.range[c])
    }

    fn inverse(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) * self.range[c] + self.min[c])
    }
}

fn grid(points_per_dim: usize, dim: usize, span: (f64, f64)) -> Matrix {
    let total = points_per_dim.pow(dim as u32);
    let step = (span.1 - span.0) / (points_per_dim - 1) as f64;
    Matrix::from_fn(total, dim, |r, c| {
        let idx = (r / points_per_dim.pow((dim - 1 - c) as u32)) % points_per_dim;
        span.0 + idx as f64 * step
    })
}

/// Grid points whose normalized distance to the training labels falls in
/// the band, plus in-distribution targets drawn from `in_candidates`.
pub fn generate_ood_targets(train_labels: &Matrix, in_candidates: &Matrix, cfg: &OodConfig) -> Result<OodSet> {
    let dim = train_labels.cols();
    if dim == 0 || dim > MAX_GRID_LABEL_DIM {
        return Err(Error::config(format!("OOD grid supports 1..={MAX_GRID_LABEL_DIM} label dims, got {dim}")));
    }
    check_dim("in-distribution candidate width", dim, in_candidates.cols())?;
    if cfg.grid_points_per_dim < 2 {
        return Err(Error::config("OOD grid needs at least 2 points per dimension"));
    }
    if !(cfg.band.0 <= cfg.band.1) || cfg.band.0 < 0.0 {
        return Err(Error::config("OOD band must satisfy 0 <= lo <= hi"));
    }
    if cfg.n_in > in_candidates.rows() {
        return Err(Error::config(format!(
            "requested {} in-distribution targets but only {} candidates exist",
            cfg.n_in,
            in_candidates.rows()
        )));
    }
    let scale = MinMax::fit(train_labels)?;
    let train = scale.forward(train_labels);
    let points = grid(cfg.grid_points_per_dim, dim, cfg.span);
    let dist = nn_distances(&points, &train)?;
    let kept: Vec<usize> = (0..dist.len())
        .filter(|&i| dist[i] >= cfg.band.0 && dist[i] <= cfg.band.1)
        .collect();
    if kept.is_empty() {
        return Err(Error::NoOodPoints);
    }
    let band_count = kept.len();
    let mut rng = seeded(derive_seed(cfg.seed, "ood/select"));
    let chosen: Vec<usize> = if cfg.n_ood >= kept.len() {
        kept
    } else {
        let mut picks: Vec<usize> = sample(&mut rng, kept.len(), cfg.n_ood).into_iter().map(|j| kept[j]).collect();
        picks.sort_unstable();
        picks
    };
    let mut in_rng = seeded(derive_seed(cfg.seed, "ood/in"));
    let mut in_rows: Vec<usize> = sample(&mut in_rng, in_candidates.rows(), cfg.n_in).into_vec();
    in_rows.sort_unstable();
    Ok(OodSet {
        in_dist: in_candidates.select_rows(&in_rows),
        ood: scale.inverse(&points.select_rows(&chosen)),
        distances: chosen.iter().map(|&i| dist[i]).collect(),
        band_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetric {
    pub metric: String,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
}

/// AUC per metric available in both score sets, OOD as the positive class.
pub fn ood_detection(in_scores: &UqScores, ood_scores: &UqScores) -> Result<Vec<OodMetric>> {
    let mut out = Vec::new();
    for (metric, pos) in ood_scores.available() {
        let Some(neg) = in_scores.get(metric) else {
            continue;
        };
        out.push(OodMetric {
            metric: metric.name().to_string(),
            auc: roc_auc(pos, neg)?,
            roc: roc_points(pos, neg),
        });
    }
    Ok(out)
}
