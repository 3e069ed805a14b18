//! Select-best and error-rejection experiments over scored candidates.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::stats::pearson;
use super::Oracle;
use crate::error::{check_dim, Error, Result};
use crate::flow::{FlowModel, VelocityField};
use crate::matrix::Matrix;
use crate::ode::synthesize;
use crate::rng::{derive_seed, seeded};
use crate::uq::{score_synthesis, ScoreRequest, UqScores};

/// `k` generated candidates per target with true errors and UQ scores.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub k: usize,
    pub targets: Matrix,
    /// Target-major candidates (`k` consecutive rows per target).
    pub designs: Matrix,
    pub errors: Vec<f64>,
    pub scores: UqScores,
    pub clipped: usize,
    /// Network evaluations spent on synthesis.
    pub synthesis_evals: u64,
    /// Extra network evaluations spent computing Zero-Deviation.
    pub zero_dev_evals: u64,
}

/// Generates and scores `k` candidates per target with a flow.
#[allow(clippy::too_many_arguments)]
pub fn candidate_pool<O: Oracle + ?Sized>(
    model: &FlowModel,
    request: ScoreRequest<'_>,
    oracle: &O,
    targets: &Matrix,
    cond: Option<&Matrix>,
    k: usize,
    seed: u64,
) -> Result<CandidatePool> {
    if k == 0 {
        return Err(Error::config("candidate count K must be >= 1"));
    }
    check_dim("candidate target width", model.dims().label_dim, targets.cols())?;
    let y = targets.repeat_rows(k);
    let c = cond.map(|c| c.repeat_rows(k));
    let before = model.network_evals();
    let synthesis = synthesize(model, &y, None, c.as_ref(), seed)?;
    let after_synthesis = model.network_evals();
    let zero_dev = synthesis.tail.as_ref().map(Matrix::row_sq_norms);
    let zero_dev_evals = model.network_evals() - after_synthesis;
    let mut scores = score_synthesis(model, &synthesis, &y, c.as_ref(), request)?;
    scores.zero_dev = zero_dev;
    let out = oracle.evaluate(&synthesis.x, c.as_ref())?;
    let errors = out.labels.row_sq_dists(&y)?;
    Ok(CandidatePool {
        k,
        targets: targets.clone(),
        designs: synthesis.x,
        errors,
        scores,
        clipped: out.clipped,
        synthesis_evals: after_synthesis - before,
        zero_dev_evals,
    })
}

impl CandidatePool {
    /// `(name, scores)` for every available metric.
    pub fn named_scores(&self) -> Vec<(String, &[f64])> {
        self.scores
            .available()
            .into_iter()
            .map(|(m, s)| (m.name().to_string(), s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSelection {
    pub metric: String,
    /// Correlation over all (score, error) pairs; `None` if undefined.
    pub pearson: Option<f64>,
    pub selected_mean: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectBest {
    pub k: usize,
    pub n_targets: usize,
    /// Mean error of the first candidate per target.
    pub random_mean: f64,
    pub oracle_mean: f64,
    pub oracle_improvement: f64,
    pub metrics: Vec<MetricSelection>,
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v < &values[best] {
            best = i;
        }
    }
    best
}

/// Picks the lowest-score candidate per target for every metric.
/// Improvement is `1 − mean(selected error) / mean(random error)`, with the
/// first candidate of each target as the random pick.
pub fn select_best(errors: &[f64], k: usize, metrics: &[(String, &[f64])]) -> Result<SelectBest> {
    if k < 2 {
        return Err(Error::config("select-best needs K >= 2"));
    }
    if errors.is_empty() || !errors.len().is_multiple_of(k) {
        return Err(Error::config("error count must be a non-zero multiple of K"));
    }
    let groups = errors.len() / k;
    let mean_of = |pick: &dyn Fn(usize) -> usize| (0..groups).map(|g| errors[g * k + pick(g)]).sum::<f64>() / groups as f64;
    let random_mean = mean_of(&|_| 0);
    let oracle_mean = mean_of(&|g| argmin(&errors[g * k..(g + 1) * k]));
    let improvement = |m: f64| 1.0 - m / random_mean;
    let mut out = Vec::with_capacity(metrics.len());
    for (name, scores) in metrics {
        check_dim("select-best score count", errors.len(), scores.len())?;
        let selected_mean = mean_of(&|g| argmin(&scores[g * k..(g + 1) * k]));
        out.push(MetricSelection {
            metric: name.clone(),
            pearson: pearson(scores, errors).ok(),
            selected_mean,
            improvement: improvement(selected_mean),
        });
    }
    Ok(SelectBest {
        k,
        n_targets: groups,
        random_mean,
        oracle_mean,
        oracle_improvement: improvement(oracle_mean),
        metrics: out,
    })
}

/// Number of samples rejected at `rate`: `⌈rate · n⌉`.
pub fn rejection_count(rate: f64, n: usize) -> usize {
    // guard against products like 0.2 * 1000 = 200.00000000000003
    let x = rate * n as f64;
    let rounded = x.round();
    if (x - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        x.ceil() as usize
    }
}

fn retained_mean(errors: &[f64], order: &[usize], drop: usize) -> f64 {
    let kept = &order[drop..];
    kept.iter().map(|&i| errors[i]).sum::<f64>() / kept.len() as f64
}

/// Indices sorted by descending key, ties by index.
fn descending(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRejection {
    pub metric: String,
    pub retained_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub rates: Vec<f64>,
    pub overall_mean: f64,
    pub oracle: Vec<f64>,
    pub random: Vec<f64>,
    pub metrics: Vec<MetricRejection>,
}

/// Random-baseline shuffles per rate.
pub const RANDOM_SHUFFLES: usize = 100;

impl RejectionCurve {
    /// Relative reduction `1 − retained / overall` of a curve value.
    pub fn reduction(&self, retained: f64) -> f64 {
        1.0 - retained / self.overall_mean
    }

    pub fn metric(&self, name: &str) -> Option<&MetricRejection> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

/// Retained mean error after rejecting the highest-scoring fraction.
pub fn error_rejection(errors: &[f64], metrics: &[(String, &[f64])], rates: &[f64], seed: u64) -> Result<RejectionCurve> {
    let n = errors.len();
    if n < 2 {
        return Err(Error::config("error rejection needs at least 2 samples"));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=0.5).contains(*r)) {
        return Err(Error::config(format!("rejection rate {r} outside [0, 0.5]")));
    }
    let overall_mean = errors.iter().sum::<f64>() / n as f64;
    let oracle_order = descending(errors);
    let mut rng = seeded(derive_seed(seed, "rejection/random"));
    let shuffles: Vec<Vec<usize>> = (0..RANDOM_SHUFFLES)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect();
    let mut oracle = Vec::with_capacity(rates.len());
    let mut random = Vec::with_capacity(rates.len());
    for &rate in rates {
        let drop = rejection_count(rate, n);
        oracle.push(retained_mean(errors, &oracle_order, drop));
        random.push(shuffles.iter().map(|o| retained_mean(errors, o, drop)).sum::<f64>() / RANDOM_SHUFFLES as f64);
    }
    let mut out = Vec::with_capacity(metrics.len());
    for (name, scores) in metrics {
        check_dim("rejection score count", n, scores.len())?;
        let order = descending(scores);
        out.push(MetricRejection {
            metric: name.clone(),
            retained_mean: rates
                .iter()
                .map(|&r| retained_mean(errors, &order, rejection_count(r, n)))
                .collect(),
        });
    }
    Ok(RejectionCurve {
        rates: rates.to_vec(),
        overall_mean,
        oracle,
        random,
        metrics: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejection_hand_example() {
        let errors = [1.0, 2.0, 3.0, 4.0, 5.0];
        let curve = error_rejection(&errors, &[("e".to_string(), &errors[..])], &[0.0, 0.2], 1).unwrap();
        assert_eq!(curve.metrics[0].retained_mean, vec![3.0, 2.5]);
        assert_eq!(curve.oracle, vec![3.0, 2.5]);
        assert_eq!(curve.random[0], 3.0);
        assert_eq!(curve.overall_mean, 3.0);
    }

    #[test]
    fn rejection_rate_bounds() {
        let e = [1.0, 2.0];
        assert!(error_rejection(&e, &[], &[0.6], 0).is_err());
        assert_eq!(rejection_count(0.2, 1000), 200);
        assert_eq!(rejection_count(0.25, 10), 3);
    }

    #[test]
    fn perfect_ranking_matches_oracle() {
        let errors = [0.3, 0.1, 0.5, 0.9, 0.2, 0.4];
        let sb = select_best(&errors, 3, &[("err".to_string(), &errors[..])]).unwrap();
        assert_eq!(sb.metrics[0].selected_mean, sb.oracle_mean);
        assert_eq!(sb.metrics[0].improvement, sb.oracle_improvement);
        assert!((sb.metrics[0].pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sb.random_mean, (0.3 + 0.9) / 2.0);
        assert_eq!(sb.oracle_mean, (0.1 + 0.2) / 2.0);
    }
}
