//! DTLZ2 forward function and the radially stratified training sampler.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::dataset::{ColumnNames, Dataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, SeedRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dtlz2Config {
    pub design_dim: usize,
    #[serde(default = "default_objectives")]
    pub label_dim: usize,
    #[serde(default = "default_g_max")]
    pub g_max: f64,
}

fn default_objectives() -> usize {
    3
}

fn default_g_max() -> f64 {
    2.0
}

impl Dtlz2Config {
    pub fn new(design_dim: usize) -> Self {
        Self {
            design_dim,
            label_dim: default_objectives(),
            g_max: default_g_max(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_dim < 2 || self.design_dim < self.label_dim {
            return Err(Error::config(format!(
                "DTLZ2 needs P >= L >= 2, got P = {}, L = {}",
                self.design_dim, self.label_dim
            )));
        }
        if !(self.g_max >= 0.0 && self.g_max.is_finite()) {
            return Err(Error::config("g_max must be finite and non-negative"));
        }
        Ok(())
    }

    /// Number of distance coordinates `x_L..x_P` (1-based).
    pub fn distance_dim(&self) -> usize {
        self.design_dim - self.label_dim + 1
    }
}

/// `g = Σ (x_i - 0.5)^2` over the distance coordinates.
pub fn dtlz2_g(x: &[f64], objectives: usize) -> f64 {
    x[objectives - 1..].iter().map(|v| (v - 0.5) * (v - 0.5)).sum()
}

/// Standard DTLZ2 objectives:
/// `f_1 = (1+g) Π_{i<L} cos(π/2 x_i)`,
/// `f_m = (1+g) sin(π/2 x_{L-m+1}) Π_{i<=L-m} cos(π/2 x_i)` (1-based).
pub fn dtlz2_forward(x: &[f64], objectives: usize) -> Result<Vec<f64>> {
    if objectives < 1 || x.len() < objectives {
        return Err(Error::config(format!(
            "DTLZ2 needs P >= L >= 1, got P = {}, L = {objectives}",
            x.len()
        )));
    }
    if let Some(bad) = x.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!(
            "DTLZ2 (coordinate {bad} = {} is outside [0, 1])",
            x[bad]
        )));
    }
    let radius = 1.0 + dtlz2_g(x, objectives);
    let mut f = Vec::with_capacity(objectives);
    for m in 0..objectives {
        let cos_terms = objectives - 1 - m;
        let mut value = radius;
        for xi in &x[..cos_terms] {
            value *= (FRAC_PI_2 * xi).cos();
        }
        if m > 0 {
            value *= (FRAC_PI_2 * x[cos_terms]).sin();
        }
        f.push(value);
    }
    Ok(f)
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub fn dirichlet_sample(n_components: usize, alpha: f64, rng: &mut SeedRng) -> Vec<f64> {
    assert!(n_components >= 1, "Dirichlet needs at least one component");
    assert!(alpha > 0.0, "Dirichlet concentration must be positive");
    if n_components == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let mut w: Vec<f64> = (0..n_components).map(|_| gamma.sample(rng)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            for v in &mut w {
                *v /= total;
            }
            return w;
        }
    }
}

/// Rejection attempts before switching to the exact conditional sampler.
const REJECTION_ATTEMPTS: usize = 64;

/// Dirichlet(1) weights conditioned on `max_i w_i <= cap`.
///
/// Plain rejection first; when acceptance is too rare the draw falls back to
/// sequential sampling from the conditional marginals of the same truncated
/// uniform-simplex law, so the result distribution is identical either way.
fn capped_uniform_simplex(n: usize, cap: f64, rng: &mut SeedRng) -> Vec<f64> {
    debug_assert!(cap * n as f64 >= 1.0 - 1e-12);
    for _ in 0..REJECTION_ATTEMPTS {
        let w = dirichlet_sample(n, 1.0, rng);
        if w.iter().all(|&v| v <= cap) {
            return w;
        }
    }
    sequential_capped_simplex(n, cap, rng)
}

/// Exact sampler for the same law as [`capped_uniform_simplex`].
///
/// `v_i = w_i / cap` lies in `[0, 1]` with `Σ v_i = 1 / cap`: a uniform point
/// on a hyperplane slice of the unit cube. The marginal of the next
/// coordinate given the remaining sum is proportional to an Irwin-Hall
/// density, whose CDF is inverted by bisection.
fn sequential_capped_simplex(n: usize, cap: f64, rng: &mut SeedRng) -> Vec<f64> {
    let mut remaining = 1.0 / cap;
    let mut out = Vec::with_capacity(n);
    for k in (1..n).rev() {
        // k coordinates remain after this one
        let lo = (remaining - k as f64).max(0.0);
        let hi = remaining.min(1.0);
        let upper = irwin_hall_cdf(k, remaining - lo);
        let total = upper - irwin_hall_cdf(k, remaining - hi);
        let target = rng.random::<f64>() * total;
        let (mut a, mut b) = (lo, hi);
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            if upper - irwin_hall_cdf(k, remaining - mid) < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        let v = 0.5 * (a + b);
        out.push(v * cap);
        remaining -= v;
    }
    out.push(remaining.clamp(0.0, 1.0) * cap);
    out
}

/// CDF of the sum of `k` independent U[0,1] variables.
fn irwin_hall_cdf(k: usize, x: f64) -> f64 {
    let kf = k as f64;
    if x <= 0.0 {
        return 0.0;
    }
    if x >= kf {
        return 1.0;
    }
    if x > kf / 2.0 {
        return 1.0 - irwin_hall_cdf(k, kf - x);
    }
    let mut sum = 0.0;
    let mut binom = 1.0;
    let mut factorial = 1.0;
    for i in 1..=k {
        factorial *= i as f64;
    }
    let mut j = 0usize;
    while (j as f64) < x && j <= k {
        let term = binom * (x - j as f64).powi(k as i32);
        sum += if j.is_multiple_of(2) { term } else { -term };
        binom = binom * (k - j) as f64 / (j + 1) as f64;
        j += 1;
    }
    (sum / factorial).clamp(0.0, 1.0)
}

/// One stratified design: uniform position coordinates, a uniform target
/// `g`, and Dirichlet-allocated squared deviations of the distance
/// coordinates with random signs.
fn stratified_row(cfg: &Dtlz2Config, rng: &mut SeedRng) -> Vec<f64> {
    let positions = cfg.label_dim - 1;
    let distance = cfg.distance_dim();
    let mut x = Vec::with_capacity(cfg.design_dim);
    for _ in 0..positions {
        x.push(rng.random::<f64>());
    }
    let g = rng.random::<f64>() * cfg.g_max;
    // every squared deviation must stay within 0.25 to keep x in [0, 1]
    let weights = if g <= 0.25 {
        dirichlet_sample(distance, 1.0, rng)
    } else {
        capped_uniform_simplex(distance, 0.25 / g, rng)
    };
    for w in weights {
        let dev = (g * w).sqrt().min(0.5);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        x.push(0.5 + sign * dev);
    }
    x
}

/// `n` stratified DTLZ2 samples; row `i` draws from stream `i` of `seed`.
pub fn sample_dtlz2_stratified(cfg: &Dtlz2Config, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("sample count must be >= 1"));
    }
    let max_g = 0.25 * cfg.distance_dim() as f64;
    if cfg.g_max > max_g {
        return Err(Error::config(format!(
            "g_max = {} is unreachable inside the unit box with {} distance coordinates (max {max_g})",
            cfg.g_max,
            cfg.distance_dim()
        )));
    }
    let mut x = Matrix::zeros(n, cfg.design_dim);
    let mut y = Matrix::zeros(n, cfg.label_dim);
    for r in 0..n {
        let mut rng = stream_rng(seed, r as u64);
        let row = stratified_row(cfg, &mut rng);
        let f = dtlz2_forward(&row, cfg.label_dim)?;
        x.row_mut(r).copy_from_slice(&row);
        y.row_mut(r).copy_from_slice(&f);
    }
    let columns = ColumnNames {
        design: (1..=cfg.design_dim).map(|i| format!("x{i}")).collect(),
        label: (1..=cfg.label_dim).map(|i| format!("f{i}")).collect(),
        condition: Vec::new(),
    };
    Dataset::new(x, y, None, columns)
}
