//! Conditional flow matching in the augmented design/label space.
//!
//! Two pairings are supported:
//!
//! - `Cfm`: `s0 = [z; y]` with `z` of width `P - L`, `s1 = x`.
//! - `DiagCfm`: `s0 = [z; y]` with `z` of width `P`, `s1 = [x; 0_L]`. Labels
//!   flow to zero and every design coordinate is paired with its own noise
//!   coordinate, so the regression targets do not depend on how design or
//!   label columns happen to be ordered.
//!
//! The velocity network sees `[s; cond; t]` and regresses the straight-line
//! velocity `u = s1 - s0` at `s_t = (1 - t) s0 + t s1`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bench::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{mse_rows, step_lr, Activation, AdamState, MlpModel, MlpSpec};
use crate::rng::{derive_seed, seeded, SeedRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowVariant {
    Cfm,
    DiagCfm,
}

impl FlowVariant {
    pub fn name(self) -> &'static str {
        match self {
            FlowVariant::Cfm => "cfm",
            FlowVariant::DiagCfm => "diag_cfm",
        }
    }
}

impl std::fmt::Display for FlowVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Latent base distribution. Only the unit box is implemented.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    #[default]
    Uniform01,
}

impl BaseDistribution {
    pub fn sample(self, rng: &mut SeedRng) -> f64 {
        match self {
            BaseDistribution::Uniform01 => rng.random::<f64>(),
        }
    }
}

pub const DEFAULT_STEPS: usize = 30;

/// Problem geometry shared by every flow-level operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowDims {
    pub variant: FlowVariant,
    pub design_dim: usize,
    pub label_dim: usize,
    pub cond_dim: usize,
    pub steps: usize,
}

impl FlowDims {
    pub fn new(variant: FlowVariant, design_dim: usize, label_dim: usize, cond_dim: usize) -> Result<Self> {
        let dims = Self {
            variant,
            design_dim,
            label_dim,
            cond_dim,
            steps: DEFAULT_STEPS,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.design_dim == 0 || self.label_dim == 0 {
            return Err(Error::config("design and label widths must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("integrator needs at least one step"));
        }
        if self.variant == FlowVariant::Cfm && self.design_dim <= self.label_dim {
            return Err(Error::config(format!(
                "CFM needs more design than label coordinates (P = {}, L = {}): latent width would be {}",
                self.design_dim,
                self.label_dim,
                self.design_dim as isize - self.label_dim as isize
            )));
        }
        Ok(())
    }

    /// Width of the integrated state.
    pub fn state_dim(&self) -> usize {
        match self.variant {
            FlowVariant::Cfm => self.design_dim,
            FlowVariant::DiagCfm => self.design_dim + self.label_dim,
        }
    }

    /// Width of the latent noise `z`.
    pub fn latent_dim(&self) -> usize {
        match self.variant {
            FlowVariant::Cfm => self.design_dim - self.label_dim,
            FlowVariant::DiagCfm => self.design_dim,
        }
    }

    /// `[s; cond; t]`
    pub fn net_input_dim(&self) -> usize {
        self.state_dim() + self.cond_dim + 1
    }

    pub(crate) fn check_cond(&self, rows: usize, cond: Option<&Matrix>) -> Result<()> {
        match (self.cond_dim, cond) {
            (0, None) => Ok(()),
            (0, Some(c)) => check_dim("condition width", 0, c.cols()),
            (w, Some(c)) => {
                check_dim("condition width", w, c.cols())?;
                check_dim("condition rows", rows, c.rows())
            }
            (w, None) => Err(Error::Dimension {
                context: "condition width",
                expected: w,
                got: 0,
            }),
        }
    }
}

/// A time-dependent velocity field over flow states.
pub trait VelocityField {
    fn dims(&self) -> &FlowDims;

    /// Velocity for every row of `states` at the per-row times `t`.
    fn velocity(&self, t: &[f64], states: &Matrix, cond: Option<&Matrix>) -> Result<Matrix>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dims(&self) -> &FlowDims {
        (**self).dims()
    }

    fn velocity(&self, t: &[f64], states: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        (**self).velocity(t, states, cond)
    }
}

/// Trained (or trainable) flow: an MLP velocity field plus its geometry.
#[derive(Debug, Serialize, Deserialize)]
pub struct FlowModel {
    dims: FlowDims,
    #[serde(default)]
    base: BaseDistribution,
    net: MlpModel,
    /// Batched network evaluations since construction (not persisted).
    #[serde(skip)]
    evals: AtomicU64,
}

impl Clone for FlowModel {
    fn clone(&self) -> Self {
        Self {
            dims: self.dims,
            base: self.base,
            net: self.net.clone(),
            evals: AtomicU64::new(0),
        }
    }
}

impl PartialEq for FlowModel {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.base == other.base && self.net == other.net
    }
}

impl FlowModel {
    pub fn new(dims: FlowDims, net: MlpModel) -> Result<Self> {
        dims.validate()?;
        check_dim("velocity net input", dims.net_input_dim(), net.input_dim())?;
        check_dim("velocity net output", dims.state_dim(), net.output_dim())?;
        Ok(Self {
            dims,
            base: BaseDistribution::Uniform01,
            net,
            evals: AtomicU64::new(0),
        })
    }

    /// Freshly initialized network for `dims`.
    pub fn init(dims: FlowDims, hidden_widths: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(dims.net_input_dim(), hidden_widths, dims.state_dim(), activation)?;
        Self::new(dims, MlpModel::init(spec, seed)?)
    }

    pub fn net(&self) -> &MlpModel {
        &self.net
    }

    pub fn base(&self) -> BaseDistribution {
        self.base
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn network_evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_network_evals(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    fn net_input(&self, t: &[f64], states: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        check_dim("flow state width", self.dims.state_dim(), states.cols())?;
        check_dim("time vector length", states.rows(), t.len())?;
        self.dims.check_cond(states.rows(), cond)?;
        let time = Matrix::from_vec(t.len(), 1, t.to_vec())?;
        match cond {
            Some(c) if c.cols() > 0 => Matrix::hcat(&[states, c, &time]),
            _ => Matrix::hcat(&[states, &time]),
        }
    }
}

impl VelocityField for FlowModel {
    fn dims(&self) -> &FlowDims {
        &self.dims
    }

    fn velocity(&self, t: &[f64], states: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        let input = self.net_input(t, states, cond)?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.net.forward(&input)
    }
}

/// `(s0, s1)` for a batch; `z` must have the variant's latent width.
pub fn build_states(variant: FlowVariant, x: &Matrix, y: &Matrix, z: &Matrix) -> Result<(Matrix, Matrix)> {
    let (p, l) = (x.cols(), y.cols());
    check_dim("build_states label rows", x.rows(), y.rows())?;
    check_dim("build_states latent rows", x.rows(), z.rows())?;
    match variant {
        FlowVariant::Cfm => {
            if p <= l {
                return Err(Error::config(format!(
                    "CFM needs P > L, got P = {p}, L = {l}"
                )));
            }
            check_dim("CFM latent width", p - l, z.cols())?;
            Ok((Matrix::hcat(&[z, y])?, x.clone()))
        }
        FlowVariant::DiagCfm => {
            check_dim("Diag-CFM latent width", p, z.cols())?;
            let zeros = Matrix::zeros(x.rows(), l);
            Ok((Matrix::hcat(&[z, y])?, Matrix::hcat(&[x, &zeros])?))
        }
    }
}

/// `u = s1 - s0`.
pub fn target_velocity(s0: &Matrix, s1: &Matrix) -> Result<Matrix> {
    s1.sub(s0)
}

/// Row-wise `(1 - t_i) s0_i + t_i s1_i`.
pub fn interpolate(s0: &Matrix, s1: &Matrix, t: &[f64]) -> Result<Matrix> {
    s0.check_same_shape("interpolate", s1)?;
    check_dim("interpolate times", s0.rows(), t.len())?;
    let mut out = s0.clone();
    let cols = s0.cols();
    for (r, &ti) in t.iter().enumerate() {
        let a = s0.row(r);
        let b = s1.row(r);
        let dst = out.row_mut(r);
        for c in 0..cols {
            dst[c] = (1.0 - ti) * a[c] + ti * b[c];
        }
    }
    Ok(out)
}

/// Everything one flow-matching regression step needs.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub s0: Matrix,
    pub s1: Matrix,
    pub t: Vec<f64>,
    pub st: Matrix,
    pub u: Matrix,
}

impl FlowBatch {
    /// Draws one latent row and one time per sample from `rng`.
    pub fn sample(dims: &FlowDims, base: BaseDistribution, x: &Matrix, y: &Matrix, rng: &mut SeedRng) -> Result<Self> {
        check_dim("flow batch design width", dims.design_dim, x.cols())?;
        check_dim("flow batch label width", dims.label_dim, y.cols())?;
        let n = x.rows();
        let width = dims.latent_dim();
        let mut z = Matrix::zeros(n, width);
        let mut t = Vec::with_capacity(n);
        for r in 0..n {
            for v in z.row_mut(r) {
                *v = base.sample(rng);
            }
            t.push(rng.random::<f64>());
        }
        Self::from_parts(dims.variant, x, y, &z, t)
    }

    pub fn from_parts(variant: FlowVariant, x: &Matrix, y: &Matrix, z: &Matrix, t: Vec<f64>) -> Result<Self> {
        let (s0, s1) = build_states(variant, x, y, z)?;
        let u = target_velocity(&s0, &s1)?;
        let st = interpolate(&s0, &s1, &t)?;
        Ok(Self { s0, s1, t, st, u })
    }
}

/// Monte-Carlo flow-matching loss on one batch.
pub fn fm_loss<F: VelocityField>(
    field: &F,
    x: &Matrix,
    y: &Matrix,
    cond: Option<&Matrix>,
    rng: &mut SeedRng,
) -> Result<f64> {
    let batch = FlowBatch::sample(field.dims(), BaseDistribution::Uniform01, x, y, rng)?;
    let v = field.velocity(&batch.t, &batch.st, cond)?;
    let (loss, _) = mse_rows(&v, &batch.u)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub step_size: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: Option<StepSchedule>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if let Some(s) = self.lr_schedule {
            if s.step_size == 0 {
                return Err(Error::config("lr_schedule.step_size must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            Some(s) => step_lr(self.learning_rate, epoch, s.step_size, s.gamma),
            None => self.learning_rate,
        }
    }
}

/// Network shape and integrator settings for a new flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub variant: FlowVariant,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedFlow {
    pub model: FlowModel,
    pub history: Vec<EpochLoss>,
}

/// Seed-derived permutation of `0..n` for `epoch`.
pub(crate) fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded(derive_seed(seed, &format!("shuffle/{epoch}")));
    order.shuffle(&mut rng);
    order
}

/// Minibatch Adam on the flow-matching loss. The dataset is expected to be
/// normalized to the unit box already.
pub fn train_flow(config: &TrainConfig, arch: &FlowArch, dataset: &Dataset) -> Result<TrainedFlow> {
    config.validate()?;
    let dims = FlowDims::new(arch.variant, dataset.design_dim(), dataset.label_dim(), dataset.cond_dim())?
        .with_steps(arch.steps);
    let mut model = FlowModel::init(
        dims,
        arch.hidden_widths.clone(),
        arch.activation,
        derive_seed(config.seed, "flow/init"),
    )?;
    let mut adam = AdamState::for_params(config.learning_rate, &model.net.param_slices());
    let mut noise = seeded(derive_seed(config.seed, "flow/noise"));
    let n = dataset.len();
    if n == 0 {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        adam.learning_rate = lr;
        let order = epoch_order(config.seed, epoch, n);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let x = dataset.x.select_rows(idx);
            let y = dataset.y.select_rows(idx);
            let cond = dataset.cond.as_ref().map(|c| c.select_rows(idx));
            let batch = FlowBatch::sample(&dims, model.base, &x, &y, &mut noise)?;
            let input = model.net_input(&batch.t, &batch.st, cond.as_ref())?;
            let (loss, grads) = model
                .net
                .loss_and_grad(&input, &batch.u)
                .map_err(|e| with_step_context(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("flow loss at epoch {epoch}, step {step}")));
            }
            adam.step(&mut model.net.param_slices_mut(), &grads.slices())?;
            loss_sum += loss * idx.len() as f64;
        }
        history.push(EpochLoss {
            epoch,
            mean_loss: loss_sum / n as f64,
            lr,
        });
    }
    Ok(TrainedFlow { model, history })
}

pub(crate) fn with_step_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric { context } => Error::numeric(format!("{context} (epoch {epoch}, step {step})")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn diag_states_and_velocity() {
        let x = m(1, 2, &[0.2, 0.8]);
        let y = m(1, 1, &[0.5]);
        let z = m(1, 2, &[0.1, 0.3]);
        let (s0, s1) = build_states(FlowVariant::DiagCfm, &x, &y, &z).unwrap();
        assert_eq!(s0.data(), &[0.1, 0.3, 0.5]);
        assert_eq!(s1.data(), &[0.2, 0.8, 0.0]);
        let u = target_velocity(&s0, &s1).unwrap();
        assert!((u.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((u.get(0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(u.get(0, 2), -0.5);
    }

    #[test]
    fn cfm_states_and_velocity() {
        let x = m(1, 2, &[0.2, 0.8]);
        let y = m(1, 1, &[0.5]);
        let z = m(1, 1, &[0.1]);
        let (s0, s1) = build_states(FlowVariant::Cfm, &x, &y, &z).unwrap();
        assert_eq!(s0.data(), &[0.1, 0.5]);
        assert_eq!(s1.data(), &[0.2, 0.8]);
        let u = target_velocity(&s0, &s1).unwrap();
        assert!((u.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((u.get(0, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cfm_requires_more_designs_than_labels() {
        let x = m(1, 2, &[0.2, 0.8]);
        let y = m(1, 2, &[0.5, 0.5]);
        let z = Matrix::zeros(1, 0);
        assert!(matches!(
            build_states(FlowVariant::Cfm, &x, &y, &z),
            Err(Error::Config(_))
        ));
        assert!(FlowDims::new(FlowVariant::Cfm, 3, 3, 0).is_err());
        assert!(FlowDims::new(FlowVariant::DiagCfm, 3, 3, 0).is_ok());
    }

    #[test]
    fn state_widths_per_variant() {
        let d = FlowDims::new(FlowVariant::DiagCfm, 14, 3, 2).unwrap();
        assert_eq!((d.state_dim(), d.latent_dim(), d.net_input_dim()), (17, 14, 20));
        let c = FlowDims::new(FlowVariant::Cfm, 14, 3, 2).unwrap();
        assert_eq!((c.state_dim(), c.latent_dim(), c.net_input_dim()), (14, 11, 17));
    }

    #[test]
    fn equal_states_have_zero_velocity() {
        let s = m(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(target_velocity(&s, &s).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let s0 = m(2, 2, &[0.1, 0.7, 0.3, 0.9]);
        let s1 = m(2, 2, &[0.6, 0.2, 0.35, 0.05]);
        assert_eq!(interpolate(&s0, &s1, &[0.0, 0.0]).unwrap(), s0);
        assert_eq!(interpolate(&s0, &s1, &[1.0, 1.0]).unwrap(), s1);
    }

    #[test]
    fn step_lr_schedule_in_config() {
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 100,
            learning_rate: 1e-3,
            lr_schedule: Some(StepSchedule {
                step_size: 20,
                gamma: 0.8,
            }),
            seed: 0,
        };
        assert_eq!(cfg.lr_at(19), 1e-3);
        assert!((cfg.lr_at(20) - 8e-4).abs() < 1e-18);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(3, 1, 50);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
