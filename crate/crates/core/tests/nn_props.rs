use diagflow::matrix::Matrix;
use diagflow::nn::{Activation, AdamState, MlpModel, MlpSpec};
use diagflow::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

fn fd_max_rel_error(net: &mut MlpModel, x: &Matrix, y: &Matrix) -> f64 {
    let (_, grads) = net.loss_and_grad(x, y).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (ti, g) in analytic.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            let orig = net.param_slices()[ti][j];
            net.param_slices_mut()[ti][j] = orig + h;
            let lp = net.loss_and_grad(x, y).unwrap().0;
            net.param_slices_mut()[ti][j] = orig - h;
            let lm = net.loss_and_grad(x, y).unwrap().0;
            net.param_slices_mut()[ti][j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((gj - fd).abs() / gj.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_match_finite_differences(
        widths in prop::collection::vec(1usize..=8, 1..=3),
        input in 1usize..=5,
        output in 1usize..=4,
        rows in 1usize..=6,
        seed in any::<u64>(),
    ) {
        let spec = MlpSpec::new(input, widths, output, Activation::LeakyRelu).unwrap();
        let mut net = MlpModel::init(spec, seed).unwrap();
        let mut rng = seeded(seed ^ 0x5eed);
        let x = Matrix::from_fn(rows, input, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = Matrix::from_fn(rows, output, |_, _| rng.random::<f64>());
        prop_assert!(fd_max_rel_error(&mut net, &x, &y) <= 1e-4);
    }

    #[test]
    fn forward_is_row_independent(seed in any::<u64>(), rows in 2usize..=9) {
        let spec = MlpSpec::new(3, vec![7, 5], 2, Activation::Relu).unwrap();
        let net = MlpModel::init(spec, seed).unwrap();
        let mut rng = seeded(seed);
        let x = Matrix::from_fn(rows, 3, |_, _| rng.random::<f64>());
        let full = net.forward(&x).unwrap();
        for r in 0..rows {
            let single = net.forward(&x.select_rows(&[r])).unwrap();
            for (a, b) in single.row(0).iter().zip(full.row(r)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn he_init_std_matches_fan_in() {
    let spec = MlpSpec::new(100, vec![100], 1, Activation::LeakyRelu).unwrap();
    let net = MlpModel::init(spec, 42).unwrap();
    let w = net.weights()[0].data();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let target = (2.0f64 / 100.0).sqrt();
    assert!((std / target - 1.0).abs() < 0.1, "std {std} vs {target}");
    assert!(net.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
}

#[test]
fn adam_update_magnitude_converges_to_learning_rate() {
    let lr = 0.01;
    let mut params = vec![1.0, -2.0, 0.5];
    let grads = vec![0.3, -7.0, 1e-3];
    let mut adam = AdamState::for_params(lr, &[&params]);
    let mut last = params.clone();
    for _ in 0..100 {
        adam.step(&mut [params.as_mut_slice()], &[&grads]).unwrap();
        for (i, (p, l)) in params.iter().zip(&last).enumerate() {
            let step = (p - l).abs();
            assert!(step <= lr * 1.01, "component {i} stepped {step}");
        }
        last = params.clone();
    }
    let mut probe = params.clone();
    adam.step(&mut [probe.as_mut_slice()], &[&grads]).unwrap();
    for (p, l) in probe.iter().zip(&params) {
        assert!(((p - l).abs() / lr - 1.0).abs() < 0.01);
    }
}

#[test]
fn gradient_descent_fits_linear_map() {
    let spec = MlpSpec::new(2, vec![16], 1, Activation::LeakyRelu).unwrap();
    let mut net = MlpModel::init(spec, 9).unwrap();
    let mut rng = seeded(10);
    let x = Matrix::from_fn(64, 2, |_, _| rng.random::<f64>());
    let y = Matrix::from_fn(64, 1, |r, _| 0.3 * x.get(r, 0) - 0.7 * x.get(r, 1));
    let initial = net.loss_and_grad(&x, &y).unwrap().0;
    let mut adam = AdamState::for_params(1e-2, &net.param_slices());
    for _ in 0..500 {
        let (_, g) = net.loss_and_grad(&x, &y).unwrap();
        adam.step(&mut net.param_slices_mut(), &g.slices()).unwrap();
    }
    let fin = net.loss_and_grad(&x, &y).unwrap().0;
    assert!(fin < 0.01 * initial, "{initial} -> {fin}");
}
