mod common;

use std::f64::consts::FRAC_2_PI;

use diagflow::bench::{sample_dtlz2_stratified, Dtlz2Config};
use diagflow::error::Result;
use diagflow::eval::{
    candidate_pool, design_diversity, diversity_vs_epsilon, error_rejection, forward_mse, generate_candidates, generate_ood_targets,
    nn_distances, permutation_ablation, roc_auc, round_trip_error, select_best, AblationConfig, InverseModel, OodConfig,
    OracleForward,
};
use diagflow::flow::{train_flow, FlowDims, FlowModel, FlowVariant};
use diagflow::matrix::Matrix;
use diagflow::nn::{Activation, MlpModel, MlpSpec};
use diagflow::rng::{derive_seed, seeded, stream_rng};
use diagflow::uq::ScoreRequest;
use proptest::prelude::*;
use rand::Rng;

/// Exact inverse of two-objective DTLZ2 on its Pareto front.
struct FrontInverse {
    design_dim: usize,
}

impl InverseModel for FrontInverse {
    fn design_dim(&self) -> usize {
        self.design_dim
    }

    fn label_dim(&self) -> usize {
        2
    }

    fn generate(&self, y_star: &Matrix, _: Option<&Matrix>, _: u64) -> Result<Matrix> {
        Ok(Matrix::from_fn(y_star.rows(), self.design_dim, |r, c| {
            if c == 0 {
                FRAC_2_PI * y_star.get(r, 1).atan2(y_star.get(r, 0))
            } else {
                0.5
            }
        }))
    }

    fn predict(&self, x: &Matrix, _: Option<&Matrix>) -> Result<Matrix> {
        let oracle = OracleForward::Dtlz2 {
            objectives: 2,
            stats: None,
        };
        Ok(diagflow::eval::Oracle::evaluate(&oracle, x, None)?.labels)
    }
}

fn front_targets(n: usize) -> Matrix {
    Matrix::from_fn(n, 2, |r, c| {
        let a = (r as f64 + 0.5) / n as f64 * std::f64::consts::FRAC_PI_2;
        if c == 0 {
            a.cos()
        } else {
            a.sin()
        }
    })
}

#[test]
fn perfect_generator_has_zero_round_trip() {
    let model = FrontInverse { design_dim: 5 };
    let oracle = OracleForward::Dtlz2 {
        objectives: 2,
        stats: None,
    };
    let targets = front_targets(300);
    let rt = round_trip_error(&model, &oracle, &targets, None, 0).unwrap();
    assert!(rt.mean < 1e-6);
    assert_eq!(rt.clipped, 0);
    let labels = model.predict(&rt.designs, None).unwrap();
    for (r, e) in rt.errors.iter().enumerate() {
        let want: f64 = labels.row(r).iter().zip(targets.row(r)).map(|(a, b)| (a - b).powi(2)).sum();
        assert_eq!(*e, want);
    }
    let mse = forward_mse(&model, &rt.designs, &targets, None).unwrap();
    assert!(mse.mean < 1e-20);
}

#[test]
fn forward_mse_single_unit_residual() {
    let model = FrontInverse { design_dim: 3 };
    let x = Matrix::from_rows(&[vec![0.0, 0.5, 0.5]]).unwrap();
    let y = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let mse = forward_mse(&model, &x, &y, None).unwrap();
    assert!((mse.mean - 1.0).abs() < 1e-15);
}

fn toy_flow() -> FlowModel {
    let dims = FlowDims::new(FlowVariant::DiagCfm, 3, 1, 0).unwrap();
    FlowModel::init(dims, vec![16, 16], Activation::LeakyRelu, 8).unwrap()
}

fn toy_surrogate() -> OracleForward {
    let spec = MlpSpec::new(3, vec![8], 1, Activation::LeakyRelu).unwrap();
    OracleForward::Surrogate(MlpModel::init(spec, 9).unwrap())
}

#[test]
fn diversity_matches_brute_force_and_unfiltered_sweep() {
    let model = toy_flow();
    let targets = Matrix::from_fn(20, 1, |r, _| r as f64 / 20.0);
    let k = 6;
    let div = design_diversity(&model, &targets, None, k, 4).unwrap();
    let designs = generate_candidates(&model, &targets, None, k, 4).unwrap();
    let mut total = 0.0;
    for g in 0..20 {
        let mut dims = 0.0;
        for d in 0..3 {
            let vals: Vec<f64> = (0..k).map(|i| designs.get(g * k + i, d)).collect();
            let m = vals.iter().sum::<f64>() / k as f64;
            dims += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1) as f64;
        }
        total += dims / 3.0;
    }
    assert!((div - total / 20.0).abs() < 1e-15);

    let curve = diversity_vs_epsilon(&model, &toy_surrogate(), &targets, None, k, &[0.0, 1e-3, f64::INFINITY], 4).unwrap();
    assert_eq!(curve[2].diversity, Some(div));
    assert_eq!(curve[2].mean_valid, k as f64);
    assert_eq!(curve[0].mean_valid, 0.0);
    assert!(curve.windows(2).all(|w| w[0].mean_valid <= w[1].mean_valid));
}

#[test]
fn zero_deviation_is_free_in_candidate_pools() {
    let model = toy_flow();
    let targets = Matrix::from_fn(10, 1, |r, _| r as f64 / 10.0);
    let request = ScoreRequest {
        self_cons: false,
        fm_loss: false,
        ensemble: None,
    };
    let pool = candidate_pool(&model, request, &toy_surrogate(), &targets, None, 3, 1).unwrap();
    assert_eq!(pool.zero_dev_evals, 0);
    assert_eq!(pool.synthesis_evals, 30);
    assert_eq!(pool.errors.len(), 30);
    assert_eq!(pool.named_scores().len(), 1);
}

#[test]
fn random_scores_give_no_selection_gain() {
    let n_targets = 1000;
    let k = 10;
    let mut rng = seeded(21);
    let errors: Vec<f64> = (0..n_targets * k).map(|_| 0.5 + rng.random::<f64>()).collect();
    let scores: Vec<f64> = (0..n_targets * k).map(|_| rng.random::<f64>()).collect();
    let sb = select_best(&errors, k, &[("random".to_string(), &scores[..])]).unwrap();
    assert!(sb.metrics[0].improvement.abs() <= 0.03, "{:?}", sb.metrics[0]);
    assert!(sb.metrics[0].pearson.unwrap().abs() < 0.05);
}

#[test]
fn dtlz2_labels_yield_ood_band_points() {
    let data = sample_dtlz2_stratified(&Dtlz2Config::new(12), 4000, 31).unwrap();
    let cfg = OodConfig {
        n_in: 100,
        n_ood: 300,
        seed: 2,
        ..OodConfig::default()
    };
    let set = generate_ood_targets(&data.y, &data.y, &cfg).unwrap();
    assert_eq!(set.ood.rows(), 300);
    assert!(set.band_count >= 300);
    let scale = |m: &Matrix| {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            let col = data.y.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (m.get(r, c) - lo) / (hi - lo)
        })
    };
    let normalized_train = scale(&data.y);
    let ood = scale(&set.ood);
    for (i, d) in set.distances.iter().enumerate() {
        let brute = normalized_train
            .row_iter()
            .map(|t| t.iter().zip(ood.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        assert!((brute - d).abs() < 1e-9);
        assert!((0.02 - 1e-9..=0.08 + 1e-9).contains(&brute));
    }
    let own = nn_distances(&normalized_train.select_rows(&[0, 1, 2]), &normalized_train).unwrap();
    assert!(own.iter().all(|&d| d == 0.0));
}

fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut count = 0.0;
    for p in pos {
        for q in neg {
            count += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    count / (pos.len() * neg.len()) as f64
}

fn tied_scores(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0);
    (0..len).map(|_| (rng.random::<f64>() * 12.0).floor()).collect()
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(np in 1usize..200, nn in 1usize..200, seed in any::<u64>()) {
        let pos = tied_scores(np, seed);
        let neg = tied_scores(nn, seed.wrapping_add(1));
        let auc = roc_auc(&pos, &neg).unwrap();
        prop_assert!((auc - brute_auc(&pos, &neg)).abs() < 1e-12);
        prop_assert!((roc_auc(&neg, &pos).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }

    #[test]
    fn oracle_bounds_every_selection(groups in 1usize..30, k in 2usize..8, seed in any::<u64>()) {
        let errors = tied_scores(groups * k, seed);
        let scores = tied_scores(groups * k, seed ^ 7);
        let sb = select_best(&errors, k, &[("s".to_string(), &scores[..])]).unwrap();
        prop_assert!(sb.oracle_mean <= sb.metrics[0].selected_mean);
    }

    #[test]
    fn oracle_rejection_is_pointwise_lowest(n in 2usize..300, seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 3);
        let errors: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let rates = [0.0, 0.05, 0.2, 0.35, 0.5];
        let curve = error_rejection(&errors, &[("s".to_string(), &scores[..])], &rates, seed).unwrap();
        let overall = errors.iter().sum::<f64>() / n as f64;
        prop_assert!((curve.oracle[0] - overall).abs() < 1e-12);
        prop_assert!((curve.metrics[0].retained_mean[0] - overall).abs() < 1e-12);
        for i in 0..rates.len() {
            prop_assert!(curve.oracle[i] <= curve.metrics[0].retained_mean[i] + 1e-12);
            prop_assert!(curve.oracle[i] <= curve.random[i] + 1e-12);
        }
    }
}

#[test]
fn identity_ordering_matches_a_plain_run() {
    let split = common::dtlz2_split(12, 600, 40, 1, 2);
    let cfg = AblationConfig {
        variants: vec![FlowVariant::DiagCfm],
        orderings: 1,
        seeds: vec![3],
        include_identity: true,
        epochs: 2,
        batch_size: 100,
        hidden_widths: vec![16, 16],
        steps: 10,
        ..AblationConfig::default()
    };
    let report = permutation_ablation(&cfg, &split.train, &split.test_labels, None, &split.oracle).unwrap();
    assert_eq!(report.rows.len(), 2);
    let trained = train_flow(&cfg.train_config(3), &cfg.arch(FlowVariant::DiagCfm), &split.train).unwrap();
    let plain = round_trip_error(&trained.model, &split.oracle, &split.test_labels, None, derive_seed(3, "ablation/generate")).unwrap();
    let identity = report.rows.iter().find(|r| r.ordering_id == 0).unwrap();
    assert!(report.orderings[0].is_identity());
    assert_eq!(identity.round_trip.to_bits(), plain.mean.to_bits());
}
