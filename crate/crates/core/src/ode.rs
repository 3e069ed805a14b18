//! Explicit Euler integration of a learned velocity field.
//!
//! Synthesis runs `t: 0 -> 1` from `[z; y*]`; analysis runs `t: 1 -> 0` with
//! the sign of the field reversed, starting from `x` (CFM) or `[x; 0_L]`
//! (Diag-CFM). Forward steps evaluate the field at `t_k = k / steps`,
//! backward steps at `t_k = 1 - k / steps`.

use crate::error::{check_dim, Error, Result};
use crate::flow::{BaseDistribution, FlowVariant, VelocityField};
use crate::matrix::Matrix;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Integrates `ds/dt = field(t, s)` over `[0, 1]` with `steps` uniform steps.
pub fn integrate<F>(mut field: F, s_init: &Matrix, direction: Direction, steps: usize) -> Result<Matrix>
where
    F: FnMut(f64, &Matrix) -> Result<Matrix>,
{
    let mut out = None;
    integrate_inner(&mut field, s_init, direction, steps, |_, s| out = Some(s.clone()), true)?;
    Ok(out.unwrap_or_else(|| s_init.clone()))
}

/// Like [`integrate`] but returns every intermediate state, starting with
/// `s_init` (`steps + 1` entries).
pub fn integrate_trajectory<F>(mut field: F, s_init: &Matrix, direction: Direction, steps: usize) -> Result<Vec<Matrix>>
where
    F: FnMut(f64, &Matrix) -> Result<Matrix>,
{
    let mut states = vec![s_init.clone()];
    integrate_inner(&mut field, s_init, direction, steps, |_, s| states.push(s.clone()), false)?;
    Ok(states)
}

fn integrate_inner<F, O>(
    field: &mut F,
    s_init: &Matrix,
    direction: Direction,
    steps: usize,
    mut observe: O,
    last_only: bool,
) -> Result<()>
where
    F: FnMut(f64, &Matrix) -> Result<Matrix>,
    O: FnMut(usize, &Matrix),
{
    if steps == 0 {
        return Err(Error::config("integrator needs at least one step"));
    }
    let h = 1.0 / steps as f64;
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let mut state = s_init.clone();
    for k in 0..steps {
        let t = match direction {
            Direction::Forward => k as f64 * h,
            Direction::Backward => 1.0 - k as f64 * h,
        };
        let v = field(t, &state)?;
        check_dim("velocity rows", state.rows(), v.rows())?;
        check_dim("velocity cols", state.cols(), v.cols())?;
        state.axpy(sign * h, &v)?;
        state.ensure_finite(|| format!("ODE state at step {k}"))?;
        if !last_only || k + 1 == steps {
            observe(k, &state);
        }
    }
    Ok(())
}

/// Integrates a flow-level field, feeding every row the same time.
pub fn integrate_field<F: VelocityField>(
    field: &F,
    s_init: &Matrix,
    cond: Option<&Matrix>,
    direction: Direction,
    steps: usize,
) -> Result<Matrix> {
    let rows = s_init.rows();
    integrate(
        |t, s| field.velocity(&vec![t; rows], s, cond),
        s_init,
        direction,
        steps,
    )
}

/// Output of synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    /// First `P` state coordinates at `t = 1`.
    pub x: Matrix,
    /// Last `L` coordinates at `t = 1`; Diag-CFM only.
    pub tail: Option<Matrix>,
    /// Latent rows the trajectories started from.
    pub z: Matrix,
}

/// Output of analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    pub z_tilde: Matrix,
    pub y_hat: Matrix,
}

/// `rows x width` base samples; row `i` uses stream `row_offset + i` of `seed`.
pub fn draw_latents(base: BaseDistribution, rows: usize, width: usize, seed: u64, row_offset: u64) -> Matrix {
    let mut z = Matrix::zeros(rows, width);
    for r in 0..rows {
        let mut rng = stream_rng(seed, row_offset + r as u64);
        for v in z.row_mut(r) {
            *v = base.sample(&mut rng);
        }
    }
    z
}

/// Generates designs for target labels `y_star`. When `z` is `None` the
/// latents are drawn from the base distribution with per-row streams of
/// `seed`.
pub fn synthesize<F: VelocityField>(
    field: &F,
    y_star: &Matrix,
    z: Option<&Matrix>,
    cond: Option<&Matrix>,
    seed: u64,
) -> Result<SynthesisResult> {
    let dims = *field.dims();
    check_dim("synthesize target width", dims.label_dim, y_star.cols())?;
    let z = match z {
        Some(z) => {
            check_dim("synthesize latent width", dims.latent_dim(), z.cols())?;
            check_dim("synthesize latent rows", y_star.rows(), z.rows())?;
            z.clone()
        }
        None => draw_latents(BaseDistribution::Uniform01, y_star.rows(), dims.latent_dim(), seed, 0),
    };
    let s0 = Matrix::hcat(&[&z, y_star])?;
    let s1 = integrate_field(field, &s0, cond, Direction::Forward, dims.steps)?;
    let p = dims.design_dim;
    let (x, tail) = match dims.variant {
        FlowVariant::Cfm => (s1, None),
        FlowVariant::DiagCfm => (s1.columns(0, p), Some(s1.columns(p, p + dims.label_dim))),
    };
    Ok(SynthesisResult { x, tail, z })
}

/// Predicts labels for designs `x` by integrating backward to `t = 0`.
pub fn analyze<F: VelocityField>(field: &F, x: &Matrix, cond: Option<&Matrix>) -> Result<AnalysisResult> {
    let dims = *field.dims();
    check_dim("analyze design width", dims.design_dim, x.cols())?;
    let s1 = match dims.variant {
        FlowVariant::Cfm => x.clone(),
        FlowVariant::DiagCfm => Matrix::hcat(&[x, &Matrix::zeros(x.rows(), dims.label_dim)])?,
    };
    let s0 = integrate_field(field, &s1, cond, Direction::Backward, dims.steps)?;
    let latent = dims.latent_dim();
    Ok(AnalysisResult {
        z_tilde: s0.columns(0, latent),
        y_hat: s0.columns(latent, latent + dims.label_dim),
    })
}
