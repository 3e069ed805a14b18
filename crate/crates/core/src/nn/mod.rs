//! Minimal dense network engine: batched forward pass, reverse-mode
//! gradients, Adam and a step-decay learning-rate schedule.

mod adam;
mod mlp;

pub use adam::AdamState;
pub use mlp::{mse_rows, Activation, ForwardCache, Gradients, MlpModel, MlpSpec, LEAKY_RELU_SLOPE};

/// `lr0 * gamma^floor(epoch / step_size)`.
pub fn step_lr(lr0: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    assert!(step_size >= 1, "step_size must be >= 1");
    lr0 * gamma.powi((epoch / step_size) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_lr_boundaries() {
        assert_eq!(step_lr(1e-3, 0, 20, 0.8), 1e-3);
        assert_eq!(step_lr(1e-3, 19, 20, 0.8), 1e-3);
        assert!((step_lr(1e-3, 20, 20, 0.8) - 8e-4).abs() < 1e-18);
        assert!((step_lr(1e-3, 45, 20, 0.8) - 6.4e-4).abs() < 1e-18);
    }
}
