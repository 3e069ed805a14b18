//! Per-sample uncertainty scores for generated designs.
//!
//! - Zero-Deviation: squared norm of the Diag-CFM label tail at `t = 1`.
//! - Self-Consistency: squared distance between the requested labels and the
//!   labels recovered by analyzing the design with its tail set to zero.
//! - Ensemble Variance: trace of the standardized sample covariance of label
//!   predictions across ensemble members.
//! - Flow-matching loss: squared velocity residual at `t = 0.5` on the
//!   straight path through the generated sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flow::{FlowBatch, FlowDims, FlowModel, VelocityField};
use crate::matrix::Matrix;
use crate::ode::{analyze, SynthesisResult};

/// Floor applied to label variances so constant labels stay finite.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Time at which the flow-matching residual is evaluated.
pub const FM_SCORE_TIME: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UqMetric {
    ZeroDev,
    SelfCons,
    EnsVar,
    FmLoss,
}

impl UqMetric {
    pub const ALL: [UqMetric; 4] = [UqMetric::ZeroDev, UqMetric::SelfCons, UqMetric::EnsVar, UqMetric::FmLoss];

    pub fn name(self) -> &'static str {
        match self {
            UqMetric::ZeroDev => "zero_dev",
            UqMetric::SelfCons => "self_cons",
            UqMetric::EnsVar => "ens_var",
            UqMetric::FmLoss => "fm_loss",
        }
    }
}

impl std::fmt::Display for UqMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Independently trained flows sharing one geometry.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<FlowModel>,
    reference: usize,
}

impl Ensemble {
    pub fn new(members: Vec<FlowModel>, reference: usize) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::config(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        if reference >= members.len() {
            return Err(Error::config(format!(
                "reference member {reference} out of range for {} members",
                members.len()
            )));
        }
        let dims = members[0].dims();
        for m in &members[1..] {
            let d = m.dims();
            if (d.variant, d.design_dim, d.label_dim, d.cond_dim) != (dims.variant, dims.design_dim, dims.label_dim, dims.cond_dim)
            {
                return Err(Error::config("ensemble members must share variant, P, L and C"));
            }
        }
        Ok(Self { members, reference })
    }

    pub fn members(&self) -> &[FlowModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.reference
    }

    pub fn reference(&self) -> &FlowModel {
        &self.members[self.reference]
    }

    pub fn dims(&self) -> &FlowDims {
        self.members[0].dims()
    }
}

/// Diagonal `D_y` of per-label variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStandardizer {
    variances: Vec<f64>,
}

impl LabelStandardizer {
    /// Unbiased per-column variances of the training labels.
    pub fn fit(labels: &Matrix) -> Result<Self> {
        let n = labels.rows();
        if n < 2 {
            return Err(Error::config("label variances need at least 2 training rows"));
        }
        let variances = (0..labels.cols())
            .map(|j| unbiased_variance(&labels.column(j)))
            .collect();
        Ok(Self::from_variances(variances))
    }

    /// `D_y = I`, for labels that are already standardized.
    pub fn unit(label_dim: usize) -> Self {
        Self {
            variances: vec![1.0; label_dim],
        }
    }

    pub fn from_variances(variances: Vec<f64>) -> Self {
        let variances = variances
            .into_iter()
            .map(|v| if v.is_finite() { v.max(VARIANCE_FLOOR) } else { VARIANCE_FLOOR })
            .collect();
        Self { variances }
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// Scores for one batch of generated samples; metrics that were not
/// requested or do not apply are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UqScores {
    pub zero_dev: Option<Vec<f64>>,
    pub self_cons: Option<Vec<f64>>,
    pub ens_var: Option<Vec<f64>>,
    pub fm_loss: Option<Vec<f64>>,
}

impl UqScores {
    pub fn get(&self, metric: UqMetric) -> Option<&[f64]> {
        match metric {
            UqMetric::ZeroDev => self.zero_dev.as_deref(),
            UqMetric::SelfCons => self.self_cons.as_deref(),
            UqMetric::EnsVar => self.ens_var.as_deref(),
            UqMetric::FmLoss => self.fm_loss.as_deref(),
        }
    }

    /// Available metrics in canonical order.
    pub fn available(&self) -> Vec<(UqMetric, &[f64])> {
        UqMetric::ALL
            .iter()
            .filter_map(|&m| self.get(m).map(|s| (m, s)))
            .collect()
    }
}

/// Per-row `‖tail‖²`. No network evaluations.
pub fn zero_deviation(synthesis: &SynthesisResult) -> Result<Vec<f64>> {
    match &synthesis.tail {
        Some(tail) => Ok(tail.row_sq_norms()),
        None => Err(Error::UnsupportedMetric("zero_dev")),
    }
}

/// Per-row `‖ŷ(x) − y*‖²` with `ŷ` from one backward integration.
pub fn self_consistency<F: VelocityField>(field: &F, x: &Matrix, y_star: &Matrix, cond: Option<&Matrix>) -> Result<Vec<f64>> {
    check_dim("self-consistency target width", field.dims().label_dim, y_star.cols())?;
    check_dim("self-consistency rows", x.rows(), y_star.rows())?;
    let recovered = analyze(field, x, cond)?;
    recovered.y_hat.row_sq_dists(y_star)
}

/// Per-row `tr(D_y⁻¹ Σ̂)` over the ensemble's label predictions for `x`.
pub fn ensemble_variance(ens: &Ensemble, x: &Matrix, cond: Option<&Matrix>, std: &LabelStandardizer) -> Result<Vec<f64>> {
    let label_dim = ens.dims().label_dim;
    check_dim("standardizer width", label_dim, std.variances().len())?;
    let predictions = ens
        .members()
        .par_iter()
        .map(|m| analyze(m, x, cond).map(|a| a.y_hat))
        .collect::<Result<Vec<_>>>()?;
    let m = predictions.len() as f64;
    let mut scores = vec![0.0; x.rows()];
    for (r, score) in scores.iter_mut().enumerate() {
        for (j, var) in std.variances().iter().enumerate() {
            let mean = predictions.iter().map(|p| p.get(r, j)).sum::<f64>() / m;
            let ss: f64 = predictions
                .iter()
                .map(|p| {
                    let d = p.get(r, j) - mean;
                    d * d
                })
                .sum();
            *score += ss / (m - 1.0) / var;
        }
    }
    Ok(scores)
}

/// Per-row `‖v(0.5, s_0.5) − u‖²` on the straight path from `[z; y*]` to
/// the generated design.
pub fn fm_loss_score<F: VelocityField>(
    field: &F,
    x: &Matrix,
    y_star: &Matrix,
    z: &Matrix,
    cond: Option<&Matrix>,
) -> Result<Vec<f64>> {
    let dims = field.dims();
    check_dim("fm score design width", dims.design_dim, x.cols())?;
    check_dim("fm score latent width", dims.latent_dim(), z.cols())?;
    let batch = FlowBatch::from_parts(dims.variant, x, y_star, z, vec![FM_SCORE_TIME; x.rows()])?;
    let v = field.velocity(&batch.t, &batch.st, cond)?;
    v.row_sq_dists(&batch.u)
}

/// Which scores [`score_synthesis`] should compute.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub self_cons: bool,
    pub fm_loss: bool,
    pub ensemble: Option<(&'a Ensemble, &'a LabelStandardizer)>,
}

impl Default for ScoreRequest<'_> {
    fn default() -> Self {
        Self {
            self_cons: true,
            fm_loss: true,
            ensemble: None,
        }
    }
}

/// All requested scores for designs produced by `field` from `y_star`.
/// Zero-Deviation is included whenever the synthesis carries a tail.
pub fn score_synthesis<F: VelocityField>(
    field: &F,
    synthesis: &SynthesisResult,
    y_star: &Matrix,
    cond: Option<&Matrix>,
    request: ScoreRequest<'_>,
) -> Result<UqScores> {
    let zero_dev = synthesis.tail.as_ref().map(Matrix::row_sq_norms);
    let self_cons = if request.self_cons {
        Some(self_consistency(field, &synthesis.x, y_star, cond)?)
    } else {
        None
    };
    let fm_loss = if request.fm_loss {
        Some(fm_loss_score(field, &synthesis.x, y_star, &synthesis.z, cond)?)
    } else {
        None
    };
    let ens_var = match request.ensemble {
        Some((ens, std)) => Some(ensemble_variance(ens, &synthesis.x, cond, std)?),
        None => None,
    };
    Ok(UqScores {
        zero_dev,
        self_cons,
        ens_var,
        fm_loss,
    })
}

pub(crate) fn unbiased_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}
