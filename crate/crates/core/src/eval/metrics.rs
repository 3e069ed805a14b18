//! Forward MSE, round-trip error and design diversity.

use serde::{Deserialize, Serialize};

use super::{InverseModel, Oracle};
use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardMse {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// `mean ‖y − ŷ(x)‖²` with `ŷ` from the model's analysis direction.
pub fn forward_mse<M: InverseModel + ?Sized>(model: &M, x: &Matrix, y: &Matrix, cond: Option<&Matrix>) -> Result<ForwardMse> {
    check_dim("forward_mse label width", model.label_dim(), y.cols())?;
    let y_hat = model.predict(x, cond)?;
    let per_sample = y_hat.row_sq_dists(y)?;
    let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
    Ok(ForwardMse { per_sample, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrip {
    pub designs: Matrix,
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Designs that fell outside the oracle's domain and were clipped.
    pub clipped: usize,
}

/// Generates one design per target and scores `‖y* − f(x_gen)‖²`.
pub fn round_trip_error<M: InverseModel + ?Sized, O: Oracle + ?Sized>(
    model: &M,
    oracle: &O,
    targets: &Matrix,
    cond: Option<&Matrix>,
    seed: u64,
) -> Result<RoundTrip> {
    check_dim("round-trip oracle width", targets.cols(), oracle.label_dim())?;
    let designs = model.generate(targets, cond, seed)?;
    let out = oracle.evaluate(&designs, cond)?;
    let errors = out.labels.row_sq_dists(targets)?;
    let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    Ok(RoundTrip {
        designs,
        errors,
        mean,
        clipped: out.clipped,
    })
}

/// `k` designs per target, target-major: rows `i·k .. (i+1)·k` belong to
/// target `i`.
pub fn generate_candidates<M: InverseModel + ?Sized>(
    model: &M,
    targets: &Matrix,
    cond: Option<&Matrix>,
    k: usize,
    seed: u64,
) -> Result<Matrix> {
    let y = targets.repeat_rows(k);
    let c = cond.map(|c| c.repeat_rows(k));
    model.generate(&y, c.as_ref(), seed)
}

fn group_variance(designs: &Matrix, rows: &[usize]) -> f64 {
    let n = rows.len() as f64;
    let p = designs.cols();
    let mut total = 0.0;
    for d in 0..p {
        let mean = rows.iter().map(|&r| designs.get(r, d)).sum::<f64>() / n;
        let ss: f64 = rows
            .iter()
            .map(|&r| {
                let e = designs.get(r, d) - mean;
                e * e
            })
            .sum();
        total += ss / (n - 1.0);
    }
    total / p as f64
}

/// Mean over target groups of the dimension-averaged unbiased variance.
pub fn diversity_of_groups(designs: &Matrix, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::config("diversity needs K >= 2 samples per target"));
    }
    if !designs.rows().is_multiple_of(k) || designs.rows() == 0 {
        return Err(Error::config("candidate rows must be a non-zero multiple of K"));
    }
    let groups = designs.rows() / k;
    let total: f64 = (0..groups)
        .map(|g| group_variance(designs, &(g * k..(g + 1) * k).collect::<Vec<_>>()))
        .sum();
    Ok(total / groups as f64)
}

/// Diversity of `k` generated designs per target.
pub fn design_diversity<M: InverseModel + ?Sized>(
    model: &M,
    targets: &Matrix,
    cond: Option<&Matrix>,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::config("diversity needs K >= 2 samples per target"));
    }
    diversity_of_groups(&generate_candidates(model, targets, cond, k, seed)?, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPoint {
    pub epsilon: f64,
    /// `None` when no target has two valid samples.
    pub diversity: Option<f64>,
    pub mean_valid: f64,
}

/// Accuracy-conditioned diversity over precomputed candidates: only samples
/// with error `< ε` count.
pub fn diversity_vs_epsilon_from(designs: &Matrix, errors: &[f64], k: usize, epsilons: &[f64]) -> Result<Vec<EpsilonPoint>> {
    check_dim("candidate error count", designs.rows(), errors.len())?;
    if k < 2 || !designs.rows().is_multiple_of(k) || designs.rows() == 0 {
        return Err(Error::config("candidates must form non-empty groups of K >= 2"));
    }
    if epsilons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("epsilons must be sorted ascending"));
    }
    let groups = designs.rows() / k;
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let mut valid_total = 0usize;
        let mut div_sum = 0.0;
        let mut div_count = 0usize;
        for g in 0..groups {
            let valid: Vec<usize> = (g * k..(g + 1) * k).filter(|&r| errors[r] < eps).collect();
            valid_total += valid.len();
            if valid.len() >= 2 {
                div_sum += group_variance(designs, &valid);
                div_count += 1;
            }
        }
        out.push(EpsilonPoint {
            epsilon: eps,
            diversity: (div_count > 0).then(|| div_sum / div_count as f64),
            mean_valid: valid_total as f64 / groups as f64,
        });
    }
    Ok(out)
}

/// Generates `k` candidates per target, scores them with the oracle and
/// sweeps `epsilons`.
pub fn diversity_vs_epsilon<M: InverseModel + ?Sized, O: Oracle + ?Sized>(
    model: &M,
    oracle: &O,
    targets: &Matrix,
    cond: Option<&Matrix>,
    k: usize,
    epsilons: &[f64],
    seed: u64,
) -> Result<Vec<EpsilonPoint>> {
    let designs = generate_candidates(model, targets, cond, k, seed)?;
    let c = cond.map(|c| c.repeat_rows(k));
    let labels = oracle.evaluate(&designs, c.as_ref())?.labels;
    let errors = labels.row_sq_dists(&targets.repeat_rows(k))?;
    diversity_vs_epsilon_from(&designs, &errors, k, epsilons)
}
