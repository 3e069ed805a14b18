//! Affine-coupling invertible network trained with a bidirectional
//! MMD objective.
//!
//! A block splits its input into `u1` (first `⌈D/2⌉` columns) and `u2`:
//!
//! ```text
//! v1 = u1 ⊙ exp(clamp(s2(u2))) + t2(u2)
//! v2 = u2 ⊙ exp(clamp(s1(v1))) + t1(v1)
//! ```
//!
//! with `clamp(s) = c·tanh(s/c)`. Blocks are interleaved with fixed random
//! column permutations. The network maps a design `x` to `[ŷ; ẑ]`.
//! Gradients for both the forward and the analytic inverse pass are
//! hand-written vector-Jacobian products.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::flow::{epoch_order, with_step_context, EpochLoss, TrainConfig};
use crate::matrix::Matrix;
use crate::nn::{mse_rows, Activation, AdamState, ForwardCache, Gradients, MlpModel, MlpSpec};
use crate::rng::{derive_seed, seeded, stream_rng, SeedRng};

pub const DEFAULT_CLAMP: f64 = 2.0;
pub const DEFAULT_KERNEL_WIDTHS: [f64; 3] = [0.2, 0.5, 2.0];

/// Elementwise `c·tanh(s/c)`.
pub fn soft_clamp(s: &Matrix, c: f64) -> Matrix {
    s.map(|v| c * (v / c).tanh())
}

/// `d clamp / d s = 1 − tanh²(s/c)`.
fn soft_clamp_slope(s: f64, c: f64) -> f64 {
    let th = (s / c).tanh();
    1.0 - th * th
}

fn with_cond(half: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
    match cond {
        Some(c) if c.cols() > 0 => Matrix::hcat(&[half, c]),
        _ => Ok(half.clone()),
    }
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

fn is_permutation(perm: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    perm.len() == n && perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
}

/// Index of each subnet inside a block's parameter and gradient lists.
const S1: usize = 0;
const T1: usize = 1;
const S2: usize = 2;
const T2: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingBlock {
    width: usize,
    cond_dim: usize,
    clamp: f64,
    /// `[s1, t1, s2, t2]`.
    subnets: [MlpModel; 4],
}

/// Parameter gradients of one block, in subnet order `[s1, t1, s2, t2]`.
pub type BlockGrads = [Gradients; 4];

struct ForwardBlockCache {
    u1: Matrix,
    u2: Matrix,
    s2: ForwardCache,
    t2: ForwardCache,
    s1: ForwardCache,
    t1: ForwardCache,
}

struct InverseBlockCache {
    u1: Matrix,
    u2: Matrix,
    s1: ForwardCache,
    t1: ForwardCache,
    s2: ForwardCache,
    t2: ForwardCache,
}

impl CouplingBlock {
    pub fn init(
        width: usize,
        cond_dim: usize,
        hidden_widths: &[usize],
        activation: Activation,
        clamp: f64,
        seed: u64,
    ) -> Result<Self> {
        if width < 2 {
            return Err(Error::config("coupling blocks need width >= 2"));
        }
        let d1 = width.div_ceil(2);
        let d2 = width - d1;
        let shapes = [(d1, d2), (d1, d2), (d2, d1), (d2, d1)];
        let mut subnets = Vec::with_capacity(4);
        for (k, (input, output)) in shapes.into_iter().enumerate() {
            let spec = MlpSpec::new(input + cond_dim, hidden_widths.to_vec(), output, activation)?;
            let mut net = MlpModel::init(spec, derive_seed(seed, &format!("subnet/{k}")))?;
            // output layer starts at zero: a fresh block is the identity
            let mut params = net.param_slices_mut();
            let n = params.len();
            for p in &mut params[n - 2..] {
                p.fill(0.0);
            }
            subnets.push(net);
        }
        let subnets: [MlpModel; 4] = subnets.try_into().expect("four subnets");
        Self::from_subnets(width, cond_dim, clamp, subnets)
    }

    /// Block from explicit subnets `[s1, t1, s2, t2]`.
    pub fn from_subnets(width: usize, cond_dim: usize, clamp: f64, subnets: [MlpModel; 4]) -> Result<Self> {
        if !(clamp > 0.0 && clamp.is_finite()) {
            return Err(Error::config("clamp must be positive"));
        }
        let d1 = width.div_ceil(2);
        let d2 = width - d1;
        let expected = [(d1, d2), (d1, d2), (d2, d1), (d2, d1)];
        for (net, (input, output)) in subnets.iter().zip(expected) {
            check_dim("coupling subnet input", input + cond_dim, net.input_dim())?;
            check_dim("coupling subnet output", output, net.output_dim())?;
        }
        Ok(Self {
            width,
            cond_dim,
            clamp,
            subnets,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn split(&self) -> usize {
        self.width.div_ceil(2)
    }

    pub fn subnets(&self) -> &[MlpModel; 4] {
        &self.subnets
    }

    pub fn param_count(&self) -> usize {
        self.subnets.iter().map(MlpModel::param_count).sum()
    }

    fn halves(&self, m: &Matrix) -> Result<(Matrix, Matrix)> {
        check_dim("coupling block width", self.width, m.cols())?;
        let d1 = self.split();
        Ok((m.columns(0, d1), m.columns(d1, self.width)))
    }

    /// `a ⊙ exp(clamp(raw)) + shift`, or its inverse `(a − shift) ⊙ exp(−clamp(raw))`.
    fn affine(&self, a: &Matrix, raw: &Matrix, shift: &Matrix, inverse: bool) -> Matrix {
        let c = self.clamp;
        let mut out = a.clone();
        for ((o, &r), &t) in out.data_mut().iter_mut().zip(raw.data()).zip(shift.data()) {
            let sc = c * (r / c).tanh();
            *o = if inverse { (*o - t) * (-sc).exp() } else { *o * sc.exp() + t };
        }
        out
    }

    fn forward_cached(&self, u: &Matrix, cond: Option<&Matrix>) -> Result<(Matrix, ForwardBlockCache)> {
        let (u1, u2) = self.halves(u)?;
        let in2 = with_cond(&u2, cond)?;
        let s2 = self.subnets[S2].forward_cached(&in2)?;
        let t2 = self.subnets[T2].forward_cached(&in2)?;
        let v1 = self.affine(&u1, s2.output(), t2.output(), false);
        let in1 = with_cond(&v1, cond)?;
        let s1 = self.subnets[S1].forward_cached(&in1)?;
        let t1 = self.subnets[T1].forward_cached(&in1)?;
        let v2 = self.affine(&u2, s1.output(), t1.output(), false);
        let v = Matrix::hcat(&[&v1, &v2])?;
        v.ensure_finite(|| "coupling block output".to_string())?;
        Ok((v, ForwardBlockCache { u1, u2, s2, t2, s1, t1 }))
    }

    fn inverse_cached(&self, v: &Matrix, cond: Option<&Matrix>) -> Result<(Matrix, InverseBlockCache)> {
        let (v1, v2) = self.halves(v)?;
        let in1 = with_cond(&v1, cond)?;
        let s1 = self.subnets[S1].forward_cached(&in1)?;
        let t1 = self.subnets[T1].forward_cached(&in1)?;
        let u2 = self.affine(&v2, s1.output(), t1.output(), true);
        let in2 = with_cond(&u2, cond)?;
        let s2 = self.subnets[S2].forward_cached(&in2)?;
        let t2 = self.subnets[T2].forward_cached(&in2)?;
        let u1 = self.affine(&v1, s2.output(), t2.output(), true);
        let u = Matrix::hcat(&[&u1, &u2])?;
        u.ensure_finite(|| "coupling block inverse".to_string())?;
        Ok((u, InverseBlockCache { u1, u2, s1, t1, s2, t2 }))
    }

    pub fn forward(&self, u: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        Ok(self.forward_cached(u, cond)?.0)
    }

    pub fn inverse(&self, v: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        Ok(self.inverse_cached(v, cond)?.0)
    }

    /// Clamped log-scales `(clamp(s2(u2)), clamp(s1(v1)))` realized on `u`.
    pub fn log_scales(&self, u: &Matrix, cond: Option<&Matrix>) -> Result<(Matrix, Matrix)> {
        let (_, cache) = self.forward_cached(u, cond)?;
        Ok((
            soft_clamp(cache.s2.output(), self.clamp),
            soft_clamp(cache.s1.output(), self.clamp),
        ))
    }

    /// Backprop of a subnet; returns the gradient w.r.t. the split half only.
    fn subnet_backward(&self, k: usize, cache: &ForwardCache, grad: &Matrix, half: usize) -> Result<(Matrix, Gradients)> {
        let (gin, grads) = self.subnets[k].backward(cache, grad, true)?;
        let gin = gin.expect("input gradient requested");
        Ok((gin.columns(0, half), grads))
    }

    fn forward_vjp(&self, cache: &ForwardBlockCache, grad_v: &Matrix) -> Result<(Matrix, BlockGrads)> {
        let c = self.clamp;
        let d1 = self.split();
        let d2 = self.width - d1;
        let gv1 = grad_v.columns(0, d1);
        let gv2 = grad_v.columns(d1, self.width);

        // second stage: v2 = u2 ⊙ e1 + t1(v1)
        let a1 = cache.s1.output();
        let mut gu2 = gv2.clone();
        let mut ga1 = gv2.clone();
        for i in 0..gv2.data().len() {
            let r = a1.data()[i];
            let e = (c * (r / c).tanh()).exp();
            let g = gv2.data()[i];
            gu2.data_mut()[i] = g * e;
            ga1.data_mut()[i] = g * cache.u2.data()[i] * e * soft_clamp_slope(r, c);
        }
        let (gv1_s, grad_s1) = self.subnet_backward(S1, &cache.s1, &ga1, d1)?;
        let (gv1_t, grad_t1) = self.subnet_backward(T1, &cache.t1, &gv2, d1)?;
        let mut gv1_total = gv1;
        gv1_total.axpy(1.0, &gv1_s)?;
        gv1_total.axpy(1.0, &gv1_t)?;

        // first stage: v1 = u1 ⊙ e2 + t2(u2)
        let a2 = cache.s2.output();
        let mut gu1 = gv1_total.clone();
        let mut ga2 = gv1_total.clone();
        for i in 0..gv1_total.data().len() {
            let r = a2.data()[i];
            let e = (c * (r / c).tanh()).exp();
            let g = gv1_total.data()[i];
            gu1.data_mut()[i] = g * e;
            ga2.data_mut()[i] = g * cache.u1.data()[i] * e * soft_clamp_slope(r, c);
        }
        let (gu2_s, grad_s2) = self.subnet_backward(S2, &cache.s2, &ga2, d2)?;
        let (gu2_t, grad_t2) = self.subnet_backward(T2, &cache.t2, &gv1_total, d2)?;
        gu2.axpy(1.0, &gu2_s)?;
        gu2.axpy(1.0, &gu2_t)?;
        Ok((Matrix::hcat(&[&gu1, &gu2])?, [grad_s1, grad_t1, grad_s2, grad_t2]))
    }

    fn inverse_vjp(&self, cache: &InverseBlockCache, grad_u: &Matrix) -> Result<(Matrix, BlockGrads)> {
        let c = self.clamp;
        let d1 = self.split();
        let d2 = self.width - d1;
        let gu1 = grad_u.columns(0, d1);
        let mut gu2 = grad_u.columns(d1, self.width);

        // u1 = (v1 − t2(u2)) ⊙ exp(−clamp(s2(u2)))
        let a2 = cache.s2.output();
        let mut gv1 = gu1.clone();
        let mut gt2 = gu1.clone();
        let mut ga2 = gu1.clone();
        for i in 0..gu1.data().len() {
            let r = a2.data()[i];
            let einv = (-c * (r / c).tanh()).exp();
            let g = gu1.data()[i];
            gv1.data_mut()[i] = g * einv;
            gt2.data_mut()[i] = -g * einv;
            ga2.data_mut()[i] = -g * cache.u1.data()[i] * soft_clamp_slope(r, c);
        }
        let (gu2_s, grad_s2) = self.subnet_backward(S2, &cache.s2, &ga2, d2)?;
        let (gu2_t, grad_t2) = self.subnet_backward(T2, &cache.t2, &gt2, d2)?;
        gu2.axpy(1.0, &gu2_s)?;
        gu2.axpy(1.0, &gu2_t)?;

        // u2 = (v2 − t1(v1)) ⊙ exp(−clamp(s1(v1)))
        let a1 = cache.s1.output();
        let mut gv2 = gu2.clone();
        let mut gt1 = gu2.clone();
        let mut ga1 = gu2.clone();
        for i in 0..gu2.data().len() {
            let r = a1.data()[i];
            let einv = (-c * (r / c).tanh()).exp();
            let g = gu2.data()[i];
            gv2.data_mut()[i] = g * einv;
            gt1.data_mut()[i] = -g * einv;
            ga1.data_mut()[i] = -g * cache.u2.data()[i] * soft_clamp_slope(r, c);
        }
        let (gv1_s, grad_s1) = self.subnet_backward(S1, &cache.s1, &ga1, d1)?;
        let (gv1_t, grad_t1) = self.subnet_backward(T1, &cache.t1, &gt1, d1)?;
        gv1.axpy(1.0, &gv1_s)?;
        gv1.axpy(1.0, &gv1_t)?;
        Ok((Matrix::hcat(&[&gv1, &gv2])?, [grad_s1, grad_t1, grad_s2, grad_t2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnDims {
    pub design_dim: usize,
    pub label_dim: usize,
    pub cond_dim: usize,
}

impl InnDims {
    pub fn validate(&self) -> Result<()> {
        if self.label_dim == 0 || self.design_dim <= self.label_dim {
            return Err(Error::config(format!(
                "INN needs P > L >= 1, got P = {}, L = {}",
                self.design_dim, self.label_dim
            )));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.design_dim - self.label_dim
    }
}

/// Invertible map `x ↦ [y; z]` built from coupling blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnModel {
    dims: InnDims,
    blocks: Vec<CouplingBlock>,
    /// `permutations[i]` follows block `i`; output column `j` takes input
    /// column `permutations[i][j]`.
    permutations: Vec<Vec<usize>>,
}

/// Architecture of a new INN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnArch {
    pub blocks: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
}

fn default_clamp() -> f64 {
    DEFAULT_CLAMP
}

enum Stage {
    Block(usize),
    Perm(usize),
}

impl InnModel {
    pub fn init(dims: InnDims, arch: &InnArch, seed: u64) -> Result<Self> {
        dims.validate()?;
        if arch.blocks == 0 {
            return Err(Error::config("INN needs at least one block"));
        }
        let mut blocks = Vec::with_capacity(arch.blocks);
        let mut permutations = Vec::with_capacity(arch.blocks - 1);
        let mut perm_rng = seeded(derive_seed(seed, "inn/permutations"));
        for b in 0..arch.blocks {
            blocks.push(CouplingBlock::init(
                dims.design_dim,
                dims.cond_dim,
                &arch.hidden_widths,
                arch.activation,
                arch.clamp,
                derive_seed(seed, &format!("inn/block/{b}")),
            )?);
            if b + 1 < arch.blocks {
                let mut perm: Vec<usize> = (0..dims.design_dim).collect();
                perm.shuffle(&mut perm_rng);
                permutations.push(perm);
            }
        }
        Self::from_parts(dims, blocks, permutations)
    }

    pub fn from_parts(dims: InnDims, blocks: Vec<CouplingBlock>, permutations: Vec<Vec<usize>>) -> Result<Self> {
        dims.validate()?;
        if blocks.is_empty() {
            return Err(Error::config("INN needs at least one block"));
        }
        check_dim("INN permutation count", blocks.len() - 1, permutations.len())?;
        for b in &blocks {
            check_dim("INN block width", dims.design_dim, b.width)?;
            check_dim("INN block condition width", dims.cond_dim, b.cond_dim)?;
        }
        if !permutations.iter().all(|p| is_permutation(p, dims.design_dim)) {
            return Err(Error::config("INN permutations must be bijections of the design columns"));
        }
        Ok(Self {
            dims,
            blocks,
            permutations,
        })
    }

    pub fn dims(&self) -> &InnDims {
        &self.dims
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(CouplingBlock::param_count).sum()
    }

    fn stages(&self) -> Vec<Stage> {
        let mut out = Vec::new();
        for b in 0..self.blocks.len() {
            out.push(Stage::Block(b));
            if b < self.permutations.len() {
                out.push(Stage::Perm(b));
            }
        }
        out
    }

    fn check_cond(&self, rows: usize, cond: Option<&Matrix>) -> Result<()> {
        match cond {
            Some(c) => {
                check_dim("INN condition width", self.dims.cond_dim, c.cols())?;
                check_dim("INN condition rows", rows, c.rows())
            }
            None => check_dim("INN condition width", self.dims.cond_dim, 0),
        }
    }

    /// `x ↦ [ŷ; ẑ]`.
    pub fn forward(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        check_dim("INN input width", self.dims.design_dim, x.cols())?;
        self.check_cond(x.rows(), cond)?;
        let mut h = x.clone();
        for stage in self.stages() {
            h = match stage {
                Stage::Block(b) => self.blocks[b].forward(&h, cond)?,
                Stage::Perm(p) => h.select_columns(&self.permutations[p]),
            };
        }
        Ok(h)
    }

    /// `[y; z] ↦ x`.
    pub fn inverse(&self, yz: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        check_dim("INN output width", self.dims.design_dim, yz.cols())?;
        self.check_cond(yz.rows(), cond)?;
        let mut h = yz.clone();
        for stage in self.stages().into_iter().rev() {
            h = match stage {
                Stage::Block(b) => self.blocks[b].inverse(&h, cond)?,
                Stage::Perm(p) => h.select_columns(&inverse_permutation(&self.permutations[p])),
            };
        }
        Ok(h)
    }

    /// Label predictions `ŷ(x)`.
    pub fn predict(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<Matrix> {
        Ok(self.forward(x, cond)?.columns(0, self.dims.label_dim))
    }

    /// Designs for `y_star` with standard-normal latents; row `i` draws from
    /// stream `i` of `seed`.
    pub fn generate(&self, y_star: &Matrix, cond: Option<&Matrix>, seed: u64) -> Result<Matrix> {
        check_dim("INN target width", self.dims.label_dim, y_star.cols())?;
        let z = normal_rows(y_star.rows(), self.dims.latent_dim(), seed, 0);
        self.inverse(&Matrix::hcat(&[y_star, &z])?, cond)
    }

    /// Forward pass plus VJP; returns `(output, grad_input, block grads)`.
    fn forward_with_vjp(
        &self,
        x: &Matrix,
        cond: Option<&Matrix>,
        grad_out: impl FnOnce(&Matrix) -> Result<Matrix>,
    ) -> Result<(Matrix, Matrix, Vec<BlockGrads>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for stage in self.stages() {
            h = match stage {
                Stage::Block(b) => {
                    let (v, cache) = self.blocks[b].forward_cached(&h, cond)?;
                    caches.push(cache);
                    v
                }
                Stage::Perm(p) => h.select_columns(&self.permutations[p]),
            };
        }
        let mut g = grad_out(&h)?;
        let mut grads: Vec<Option<BlockGrads>> = (0..self.blocks.len()).map(|_| None).collect();
        for stage in self.stages().into_iter().rev() {
            match stage {
                Stage::Block(b) => {
                    let (gi, bg) = self.blocks[b].forward_vjp(&caches[b], &g)?;
                    g = gi;
                    grads[b] = Some(bg);
                }
                Stage::Perm(p) => g = g.select_columns(&inverse_permutation(&self.permutations[p])),
            }
        }
        Ok((h, g, grads.into_iter().map(|g| g.expect("every block visited")).collect()))
    }

    /// Inverse pass plus VJP; returns `(output, grad_input, block grads)`.
    fn inverse_with_vjp(
        &self,
        yz: &Matrix,
        cond: Option<&Matrix>,
        grad_out: impl FnOnce(&Matrix) -> Result<Matrix>,
    ) -> Result<(Matrix, Matrix, Vec<BlockGrads>)> {
        let mut caches: Vec<Option<InverseBlockCache>> = (0..self.blocks.len()).map(|_| None).collect();
        let mut h = yz.clone();
        let stages = self.stages();
        for stage in stages.iter().rev() {
            h = match *stage {
                Stage::Block(b) => {
                    let (u, cache) = self.blocks[b].inverse_cached(&h, cond)?;
                    caches[b] = Some(cache);
                    u
                }
                Stage::Perm(p) => h.select_columns(&inverse_permutation(&self.permutations[p])),
            };
        }
        let mut g = grad_out(&h)?;
        let mut grads: Vec<Option<BlockGrads>> = (0..self.blocks.len()).map(|_| None).collect();
        for stage in &stages {
            match *stage {
                Stage::Block(b) => {
                    let cache = caches[b].as_ref().expect("every block visited");
                    let (gi, bg) = self.blocks[b].inverse_vjp(cache, &g)?;
                    g = gi;
                    grads[b] = Some(bg);
                }
                Stage::Perm(p) => g = g.select_columns(&self.permutations[p]),
            }
        }
        Ok((h, g, grads.into_iter().map(|g| g.expect("every block visited")).collect()))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.subnets.iter_mut())
            .flat_map(|n| n.param_slices_mut())
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|b| b.subnets.iter())
            .flat_map(|n| n.param_slices())
            .collect()
    }
}

/// Flattened gradient in [`InnModel::param_slices`] order.
fn flatten_grads(grads: &[BlockGrads]) -> Vec<Vec<f64>> {
    grads
        .iter()
        .flat_map(|bg| bg.iter())
        .flat_map(|g| g.slices().into_iter().map(<[f64]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// `rows x width` standard-normal matrix; row `i` uses stream `offset + i`.
pub fn normal_rows(rows: usize, width: usize, seed: u64, offset: u64) -> Matrix {
    let mut z = Matrix::zeros(rows, width);
    for r in 0..rows {
        let mut rng = stream_rng(seed, offset + r as u64);
        for v in z.row_mut(r) {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    z
}

fn normal_matrix(rows: usize, width: usize, rng: &mut SeedRng) -> Matrix {
    Matrix::from_fn(rows, width, |_, _| StandardNormal.sample(rng))
}

/// Multi-scale inverse multiquadric kernel `Σ_w w / (w + d²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImqKernel {
    pub widths: Vec<f64>,
}

impl Default for ImqKernel {
    fn default() -> Self {
        Self {
            widths: DEFAULT_KERNEL_WIDTHS.to_vec(),
        }
    }
}

impl ImqKernel {
    pub fn value(&self, sq_dist: f64) -> f64 {
        self.widths.iter().map(|w| w / (w + sq_dist)).sum()
    }

    /// Derivative w.r.t. the squared distance.
    fn slope(&self, sq_dist: f64) -> f64 {
        self.widths
            .iter()
            .map(|w| {
                let d = w + sq_dist;
                -w / (d * d)
            })
            .sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Biased (V-statistic) squared MMD between the row sets `a` and `b`.
pub fn mmd_imq(a: &Matrix, b: &Matrix, kernel: &ImqKernel) -> Result<f64> {
    Ok(mmd_imq_grad(a, b, kernel, false)?.0)
}

/// Squared MMD and optionally its gradient w.r.t. `a`.
pub fn mmd_imq_grad(a: &Matrix, b: &Matrix, kernel: &ImqKernel, want_grad: bool) -> Result<(f64, Option<Matrix>)> {
    check_dim("mmd sample width", a.cols(), b.cols())?;
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::config("MMD needs non-empty sample sets"));
    }
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    let mut grad = want_grad.then(|| Matrix::zeros(a.rows(), a.cols()));
    let mut kaa = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.rows() {
            let d2 = sq_dist(a.row(i), a.row(j));
            kaa += kernel.value(d2);
            if let Some(g) = grad.as_mut() {
                let coef = 4.0 * kernel.slope(d2) / (n * n);
                let (ai, aj) = (a.row(i), a.row(j));
                for ((gv, x), y) in g.row_mut(i).iter_mut().zip(ai).zip(aj) {
                    *gv += coef * (x - y);
                }
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..b.rows() {
        for j in 0..b.rows() {
            kbb += kernel.value(sq_dist(b.row(i), b.row(j)));
        }
    }
    let mut kab = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let d2 = sq_dist(a.row(i), b.row(j));
            kab += kernel.value(d2);
            if let Some(g) = grad.as_mut() {
                let coef = -4.0 * kernel.slope(d2) / (n * m);
                let (ai, bj) = (a.row(i), b.row(j));
                for ((gv, x), y) in g.row_mut(i).iter_mut().zip(ai).zip(bj) {
                    *gv += coef * (x - y);
                }
            }
        }
    }
    let mmd = kaa / (n * n) + kbb / (m * m) - 2.0 * kab / (n * m);
    if !mmd.is_finite() {
        return Err(Error::numeric("MMD"));
    }
    Ok((mmd, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnLossWeights {
    pub y: f64,
    pub z: f64,
    pub x: f64,
}

impl Default for InnLossWeights {
    fn default() -> Self {
        Self { y: 1.0, z: 1.0, x: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnLoss {
    pub total: f64,
    pub l_y: f64,
    pub l_z: f64,
    pub l_x: f64,
}

impl InnLoss {
    pub fn combine(l_y: f64, l_z: f64, l_x: f64, w: &InnLossWeights) -> Self {
        Self {
            total: w.y * l_y + w.z * l_z + w.x * l_x,
            l_y,
            l_z,
            l_x,
        }
    }
}

/// Random draws used by one loss evaluation.
#[derive(Debug, Clone)]
pub struct InnNoise {
    /// Reference standard-normal sample for the latent MMD.
    pub z_prior: Matrix,
    /// Latents for the backward reconstruction.
    pub z_prime: Matrix,
}

impl InnNoise {
    pub fn sample(rows: usize, latent_dim: usize, rng: &mut SeedRng) -> Self {
        Self {
            z_prior: normal_matrix(rows, latent_dim, rng),
            z_prime: normal_matrix(rows, latent_dim, rng),
        }
    }
}

/// Loss settings shared by evaluation and training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InnObjective {
    #[serde(default)]
    pub weights: InnLossWeights,
    #[serde(default)]
    pub kernel: ImqKernel,
}

/// Bidirectional loss `λ_y L_y + λ_z L_z + λ_x L_x` on one batch.
pub fn inn_loss(
    model: &InnModel,
    x: &Matrix,
    y: &Matrix,
    cond: Option<&Matrix>,
    noise: &InnNoise,
    objective: &InnObjective,
) -> Result<InnLoss> {
    Ok(inn_loss_impl(model, x, y, cond, noise, objective, false)?.0)
}

/// [`inn_loss`] plus parameter gradients in [`InnModel::param_slices`] order.
pub fn inn_loss_and_grad(
    model: &InnModel,
    x: &Matrix,
    y: &Matrix,
    cond: Option<&Matrix>,
    noise: &InnNoise,
    objective: &InnObjective,
) -> Result<(InnLoss, Vec<Vec<f64>>)> {
    let (loss, grads) = inn_loss_impl(model, x, y, cond, noise, objective, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn inn_loss_impl(
    model: &InnModel,
    x: &Matrix,
    y: &Matrix,
    cond: Option<&Matrix>,
    noise: &InnNoise,
    objective: &InnObjective,
    want_grad: bool,
) -> Result<(InnLoss, Option<Vec<Vec<f64>>>)> {
    let dims = model.dims;
    let l = dims.label_dim;
    let p = dims.design_dim;
    check_dim("INN loss label width", l, y.cols())?;
    check_dim("INN loss rows", x.rows(), y.rows())?;
    let w = objective.weights;

    let mut l_y = 0.0;
    let mut l_z = 0.0;
    let (_, _, fwd_grads) = model.forward_with_vjp(x, cond, |out| {
        let y_hat = out.columns(0, l);
        let z_hat = out.columns(l, p);
        let (ly, gy) = mse_rows(&y_hat, y)?;
        let (lz, gz) = mmd_imq_grad(&z_hat, &noise.z_prior, &objective.kernel, want_grad)?;
        l_y = ly;
        l_z = lz;
        if !want_grad {
            return Ok(Matrix::zeros(out.rows(), p));
        }
        Matrix::hcat(&[&gy.scale(w.y), &gz.expect("requested").scale(w.z)])
    })?;

    let mut l_x = 0.0;
    let yz = Matrix::hcat(&[y, &noise.z_prime])?;
    let (_, _, inv_grads) = model.inverse_with_vjp(&yz, cond, |x_rec| {
        let (lx, gx) = mmd_imq_grad(x_rec, x, &objective.kernel, want_grad)?;
        l_x = lx;
        Ok(match gx {
            Some(g) => g.scale(w.x),
            None => Matrix::zeros(x_rec.rows(), p),
        })
    })?;

    let loss = InnLoss::combine(l_y, l_z, l_x, &w);
    if !loss.total.is_finite() {
        return Err(Error::numeric("INN loss"));
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grads = flatten_grads(&fwd_grads);
    for (acc, g) in grads.iter_mut().zip(flatten_grads(&inv_grads)) {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    Ok((loss, Some(grads)))
}

#[derive(Debug, Clone)]
pub struct TrainedInn {
    pub model: InnModel,
    pub history: Vec<EpochLoss>,
}

/// Minibatch Adam on the bidirectional loss; fresh noise every step.
pub fn train_inn(config: &TrainConfig, arch: &InnArch, objective: &InnObjective, dataset: &Dataset) -> Result<TrainedInn> {
    config.validate()?;
    let dims = InnDims {
        design_dim: dataset.design_dim(),
        label_dim: dataset.label_dim(),
        cond_dim: dataset.cond_dim(),
    };
    let mut model = InnModel::init(dims, arch, derive_seed(config.seed, "inn/init"))?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let mut adam = AdamState::for_params(config.learning_rate, &model.param_slices());
    let mut rng = seeded(derive_seed(config.seed, "inn/noise"));
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
            let noise = InnNoise::sample(idx.len(), dims.latent_dim(), &mut rng);
            let (loss, grads) = inn_loss_and_grad(&model, &x, &y, cond.as_ref(), &noise, objective)
                .map_err(|e| with_step_context(e, epoch, step))?;
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam.step(&mut model.param_slices_mut(), &grad_refs)?;
            loss_sum += loss.total * idx.len() as f64;
        }
        history.push(EpochLoss {
            epoch,
            mean_loss: loss_sum / n as f64,
            lr,
        });
    }
    Ok(TrainedInn { model, history })
}
