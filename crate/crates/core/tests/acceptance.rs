//! Desk-scale acceptance run on DTLZ2 (P = 12, L = 3) plus the fast
//! property suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! `ACCEPTANCE_CRITERIA=1,6` restricts the run to the listed criteria.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use diagflow::bench::{dtlz2_forward, dtlz2_g, sample_dtlz2_stratified, Dtlz2Config, NormStats};
use diagflow::eval::stats::{ks_critical_one_sample, ks_critical_two_sample, ks_two_sample, ks_uniform};
use diagflow::eval::{
    candidate_pool, error_rejection, generate_ood_targets, ood_detection, permutation_ablation, roc_auc, select_best,
    train_and_round_trip, AblationConfig, CandidatePool, OodConfig, Ordering,
};
use diagflow::flow::{build_states, target_velocity, FlowModel, FlowVariant};
use diagflow::inn::{mmd_imq, ImqKernel, InnArch, InnDims, InnModel};
use diagflow::matrix::Matrix;
use diagflow::nn::{Activation, MlpModel, MlpSpec};
use diagflow::ode::{integrate, Direction};
use diagflow::rng::seeded;
use diagflow::uq::{ScoreRequest, UqMetric};
use rand::Rng;

use common::{dtlz2_split, Split};

const P: usize = 12;
const N_TRAIN: usize = 20_000;
const N_TEST: usize = 3_000;
const TRAIN_DATA_SEED: u64 = 2024;
const TEST_DATA_SEED: u64 = 7_771;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, out: &Outcome) {
    let tag = if out.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} ({name}): {tag}  {}", out.detail);
}

fn budget() -> AblationConfig {
    AblationConfig {
        seeds: SEEDS.to_vec(),
        perm_seed: 11,
        ..AblationConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct RoundTrips {
    diag: Vec<f64>,
    cfm: Vec<f64>,
    diag_model: FlowModel,
}

fn round_trips(split: &Split) -> RoundTrips {
    let cfg = budget();
    let targets = split.test_labels.select_rows(&(0..1000).collect::<Vec<_>>());
    let identity = Ordering::identity(0, P, 3);
    let mut diag = Vec::new();
    let mut cfm = Vec::new();
    let mut diag_model = None;
    for &seed in &SEEDS {
        for variant in [FlowVariant::DiagCfm, FlowVariant::Cfm] {
            let t0 = Instant::now();
            let (trained, rt) =
                train_and_round_trip(&cfg.train_config(seed), &cfg.arch(variant), &split.train, &identity, &targets, None, &split.oracle)
                    .unwrap();
            println!(
                "  {variant} seed {seed}: round-trip {:.3e} (clipped {}) in {:.0}s",
                rt.mean,
                rt.clipped,
                t0.elapsed().as_secs_f64()
            );
            match variant {
                FlowVariant::DiagCfm => {
                    diag.push(rt.mean);
                    if diag_model.is_none() {
                        diag_model = Some(trained.model);
                    }
                }
                FlowVariant::Cfm => cfm.push(rt.mean),
            }
        }
    }
    RoundTrips {
        diag,
        cfm,
        diag_model: diag_model.unwrap(),
    }
}

fn criterion_1(rt: &RoundTrips) -> Outcome {
    let (d, c) = (mean(&rt.diag), mean(&rt.cfm));
    Outcome {
        pass: d < 5e-3 && c >= 5.0 * d,
        detail: format!("diag {d:.3e} (< 5e-3), cfm {c:.3e}, cfm/diag {:.2} (>= 5)", c / d),
    }
}

fn criterion_2(split: &Split) -> Outcome {
    let targets = split.test_labels.select_rows(&(0..1000).collect::<Vec<_>>());
    let report = permutation_ablation(&budget(), &split.train, &targets, None, &split.oracle).unwrap();
    for s in &report.spread {
        println!("  {} ordering means {:?} ratio {:.3}", s.variant, s.ordering_means, s.ratio);
    }
    let d = report.spread_of(FlowVariant::DiagCfm).unwrap().ratio;
    let c = report.spread_of(FlowVariant::Cfm).unwrap().ratio;
    Outcome {
        pass: d <= 2.0 && c >= 2.0 * d,
        detail: format!("diag ratio {d:.3} (<= 2), cfm ratio {c:.3} (>= {:.3})", 2.0 * d),
    }
}

fn pool(model: &FlowModel, split: &Split, targets: &Matrix, k: usize, seed: u64) -> CandidatePool {
    let request = ScoreRequest {
        self_cons: true,
        fm_loss: true,
        ensemble: None,
    };
    candidate_pool(model, request, &split.oracle, targets, None, k, seed).unwrap()
}

fn criterion_3(model: &FlowModel, split: &Split) -> Outcome {
    let cfg = OodConfig {
        n_in: 1000,
        n_ood: 1000,
        seed: 5,
        ..OodConfig::default()
    };
    let set = generate_ood_targets(&split.train.y, &split.test_labels, &cfg).unwrap();
    let in_pool = pool(model, split, &set.in_dist, 1, 301);
    let ood_pool = pool(model, split, &set.ood, 1, 302);
    let metrics = ood_detection(&in_pool.scores, &ood_pool.scores).unwrap();
    let auc = |m: UqMetric| metrics.iter().find(|r| r.metric == m.name()).unwrap().auc;
    let (zd, fm) = (auc(UqMetric::ZeroDev), auc(UqMetric::FmLoss));
    println!(
        "  {} ood points in band, self_cons AUC {:.3}",
        set.band_count,
        auc(UqMetric::SelfCons)
    );
    Outcome {
        pass: set.ood.rows() == 1000 && zd >= 0.70 && zd >= fm,
        detail: format!("zero_dev AUC {zd:.3} (>= 0.70), fm_loss AUC {fm:.3}"),
    }
}

fn criterion_4(model: &FlowModel, split: &Split) -> Outcome {
    let targets = split.test_labels.select_rows(&(0..1000).collect::<Vec<_>>());
    let p = pool(model, split, &targets, 1, 401);
    let rates = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    let curve = error_rejection(&p.errors, &p.named_scores(), &rates, 402).unwrap();
    let at = 2;
    let zd = curve.reduction(curve.metric(UqMetric::ZeroDev.name()).unwrap().retained_mean[at]);
    let oracle = curve.reduction(curve.oracle[at]);
    for m in &curve.metrics {
        println!("  {} reduction at 20%: {:+.1}%", m.metric, 100.0 * curve.reduction(m.retained_mean[at]));
    }
    Outcome {
        pass: zd >= 0.10 && oracle >= zd,
        detail: format!("zero_dev reduction {:+.1}% (>= +10%), oracle {:+.1}%", 100.0 * zd, 100.0 * oracle),
    }
}

fn criterion_5(model: &FlowModel, split: &Split) -> Outcome {
    let targets = split.test_labels.select_rows(&(1000..1500).collect::<Vec<_>>());
    let p = pool(model, split, &targets, 10, 501);
    let sb = select_best(&p.errors, 10, &p.named_scores()).unwrap();
    for m in &sb.metrics {
        println!("  {} rho {:?} improvement {:+.1}%", m.metric, m.pearson, 100.0 * m.improvement);
    }
    let zd = sb.metrics.iter().find(|m| m.metric == UqMetric::ZeroDev.name()).unwrap();
    let rho = zd.pearson.unwrap_or(f64::NAN);
    Outcome {
        pass: rho >= 0.2 && zd.improvement > 0.0,
        detail: format!(
            "zero_dev rho {rho:.3} (>= 0.2), improvement {:+.1}% (> 0), oracle {:+.1}%",
            100.0 * zd.improvement,
            100.0 * sb.oracle_improvement
        ),
    }
}

fn check(failures: &mut Vec<String>, name: &str, ok: bool, detail: String) {
    println!("  [{}] {name}: {detail}", if ok { "ok" } else { "FAILED" });
    if !ok {
        failures.push(name.to_string());
    }
}

fn gradient_check() -> f64 {
    let spec = MlpSpec::new(4, vec![8, 6, 5], 3, Activation::LeakyRelu).unwrap();
    let mut net = MlpModel::init(spec, 3).unwrap();
    let mut rng = seeded(17);
    let x = Matrix::from_fn(7, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let y = Matrix::from_fn(7, 3, |_, _| rng.random::<f64>());
    let (_, grads) = net.loss_and_grad(&x, &y).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (ti, g) in analytic.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            let orig = net.param_slices()[ti][j];
            net.param_slices_mut()[ti][j] = orig + h;
            let lp = net.loss_and_grad(&x, &y).unwrap().0;
            net.param_slices_mut()[ti][j] = orig - h;
            let lm = net.loss_and_grad(&x, &y).unwrap().0;
            net.param_slices_mut()[ti][j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((gj - fd).abs() / gj.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

fn euler_checks(failures: &mut Vec<String>) {
    let s0 = Matrix::from_rows(&[vec![0.25, -1.0, 3.0]]).unwrap();
    let c = Matrix::from_rows(&[vec![0.5, 2.0, -0.75]]).unwrap();
    let mut worst: f64 = 0.0;
    for steps in [1, 7, 30, 100] {
        let end = integrate(|_, _| Ok(c.clone()), &s0, Direction::Forward, steps).unwrap();
        let want = s0.add(&c).unwrap();
        worst = worst.max(common::max_abs_diff(end.data(), want.data()));
    }
    check(failures, "Euler constant field exact", worst <= 1e-12, format!("max error {worst:.2e}"));

    let one = Matrix::filled(1, 1, 1.0);
    let steps = [15usize, 30, 60, 120];
    let errs: Vec<f64> = steps
        .iter()
        .map(|&n| {
            let end = integrate(|_, s| Ok(s.clone()), &one, Direction::Forward, n).unwrap();
            (end.get(0, 0) - std::f64::consts::E).abs()
        })
        .collect();
    let xs: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    check(failures, "Euler O(1/steps) convergence", (0.8..=1.2).contains(&-slope), format!("slope {:.3}", -slope));
}

fn equivariance_checks(failures: &mut Vec<String>) {
    let n = 10_000;
    let data = sample_dtlz2_stratified(&Dtlz2Config::new(P), n, 90).unwrap();
    let (x, y) = (&data.x, &data.y);
    let pi_p = [7, 3, 11, 0, 5, 9, 1, 10, 4, 2, 8, 6];
    let pi_l = [2, 0, 1];
    let mut rng = seeded(91);
    let mut uniform = |cols| Matrix::from_fn(n, cols, |_, _| rng.random::<f64>());
    let z1 = uniform(P);
    let z2 = uniform(P);
    let (s0, s1) = build_states(FlowVariant::DiagCfm, x, y, &z1).unwrap();
    let u = target_velocity(&s0, &s1).unwrap();
    let state_perm: Vec<usize> = pi_p.iter().copied().chain(pi_l.iter().map(|&i| i + P)).collect();
    let permuted_u = u.select_columns(&state_perm);
    let (q0, q1) = build_states(FlowVariant::DiagCfm, &x.select_columns(&pi_p), &y.select_columns(&pi_l), &z2).unwrap();
    let built = target_velocity(&q0, &q1).unwrap();
    let crit = ks_critical_two_sample(n, n);
    let worst = (0..P + 3)
        .map(|c| ks_two_sample(&permuted_u.column(c), &built.column(c)))
        .fold(0.0, f64::max);
    check(failures, "Diag-CFM equivariance KS", worst < crit, format!("max KS {worst:.4} vs critical {crit:.4}"));

    let l = 3;
    let xs = x.clone();
    let y_tail = xs.columns(P - l, P);
    let z = uniform(P - l);
    let zero_cols = |x: &Matrix| {
        let (s0, s1) = build_states(FlowVariant::Cfm, x, &y_tail, &z).unwrap();
        let u = target_velocity(&s0, &s1).unwrap();
        (0..u.cols()).filter(|&c| u.column(c).iter().all(|&v| v == 0.0)).count()
    };
    let before = zero_cols(&xs);
    let mut swap: Vec<usize> = (0..P).collect();
    swap.swap(0, P - 1);
    let after = zero_cols(&xs.select_columns(&swap));
    check(
        failures,
        "CFM counterexample zero columns",
        before == l && after == l - 1,
        format!("{before} before swap, {after} after (expected {l} and {})", l - 1),
    );
}

fn benchmark_checks(failures: &mut Vec<String>) {
    let mut rng = seeded(92);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let mut x: Vec<f64> = (0..P).map(|_| rng.random::<f64>()).collect();
        for v in &mut x[2..] {
            *v = 0.5;
        }
        let f = dtlz2_forward(&x, 3).unwrap();
        worst = worst.max((f.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
    }
    check(failures, "DTLZ2 Pareto sphere", worst <= 1e-12, format!("max | |f| - 1 | = {worst:.2e}"));

    let cfg = Dtlz2Config::new(P);
    let data = sample_dtlz2_stratified(&cfg, 10_000, 93).unwrap();
    let g: Vec<f64> = data.x.row_iter().map(|r| dtlz2_g(r, 3)).collect();
    let ks = ks_uniform(&g, 0.0, cfg.g_max);
    let crit = ks_critical_one_sample(g.len());
    check(failures, "stratified g uniformity KS", ks < crit, format!("KS {ks:.4} vs critical {crit:.4}"));

    let stats = NormStats::fit(&data);
    let back = stats.denormalize_design(&stats.normalize_design(&data.x).unwrap()).unwrap();
    let err = common::max_abs_diff(back.data(), data.x.data());
    let back_y = stats.denormalize_labels(&stats.normalize_labels(&data.y).unwrap()).unwrap();
    let err = err.max(common::max_abs_diff(back_y.data(), data.y.data()));
    check(failures, "denormalize after normalize", err <= 1e-12, format!("max error {err:.2e}"));
}

fn inn_and_stats_checks(failures: &mut Vec<String>) {
    let dims = InnDims {
        design_dim: 6,
        label_dim: 2,
        cond_dim: 0,
    };
    let arch = InnArch {
        blocks: 4,
        hidden_widths: vec![16, 16],
        activation: Activation::LeakyRelu,
        clamp: 2.0,
    };
    let mut model = InnModel::init(dims, &arch, 94).unwrap();
    let mut rng = seeded(95);
    for slice in model.param_slices_mut() {
        for v in slice.iter_mut() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
    }
    let x = Matrix::from_fn(256, 6, |_, _| rng.random::<f64>());
    let back = model.inverse(&model.forward(&x, None).unwrap(), None).unwrap();
    let err = common::max_abs_diff(back.data(), x.data());
    check(failures, "INN inverse of forward", err <= 1e-9, format!("max error {err:.2e}"));

    let a = Matrix::from_fn(50, 3, |_, _| rng.random::<f64>());
    let mmd = mmd_imq(&a, &a, &ImqKernel::default()).unwrap();
    check(failures, "MMD(A, A) = 0", mmd.abs() <= 1e-12, format!("{mmd:.2e}"));

    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let np = 1 + trial * 37 % 500;
        let nn = 1 + trial * 53 % 500;
        let pos: Vec<f64> = (0..np).map(|_| (rng.random::<f64>() * 20.0).floor()).collect();
        let neg: Vec<f64> = (0..nn).map(|_| (rng.random::<f64>() * 20.0).floor() - 2.0).collect();
        let mut count = 0.0;
        for p in &pos {
            for q in &neg {
                count += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let brute = count / (np * nn) as f64;
        worst = worst.max((roc_auc(&pos, &neg).unwrap() - brute).abs());
    }
    check(failures, "roc_auc vs pairwise count", worst <= 1e-12, format!("max deviation {worst:.2e}"));
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let g = gradient_check();
    check(&mut failures, "MLP gradient vs finite differences", g <= 1e-4, format!("max rel error {g:.2e}"));
    euler_checks(&mut failures);
    equivariance_checks(&mut failures);
    benchmark_checks(&mut failures);
    inn_and_stats_checks(&mut failures);
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: failures.is_empty() && secs < 120.0,
        detail: if failures.is_empty() {
            format!("all property checks hold in {secs:.1}s")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    }
}

fn selected() -> Vec<usize> {
    match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=6).collect(),
    }
}

fn main() -> ExitCode {
    let wanted = selected();
    let want = |i: usize| wanted.contains(&i);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    if want(6) {
        results.push((6, "property suites", criterion_6()));
        report(6, "property suites", &results.last().unwrap().2);
    }
    if (1..=5).any(want) {
        let split = dtlz2_split(P, N_TRAIN, N_TEST, TRAIN_DATA_SEED, TEST_DATA_SEED);
        if [1, 3, 4, 5].iter().any(|&i| want(i)) {
            let rt = round_trips(&split);
            if want(1) {
                results.push((1, "round-trip Diag-CFM vs CFM", criterion_1(&rt)));
                report(1, "round-trip Diag-CFM vs CFM", &results.last().unwrap().2);
            }
            let checks: [(usize, &str, fn(&FlowModel, &Split) -> Outcome); 3] = [
                (3, "OOD detection", criterion_3),
                (4, "error rejection", criterion_4),
                (5, "select-best", criterion_5),
            ];
            for (id, name, f) in checks {
                if want(id) {
                    results.push((id, name, f(&rt.diag_model, &split)));
                    report(id, name, &results.last().unwrap().2);
                }
            }
        }
        if want(2) {
            results.push((2, "ordering ablation", criterion_2(&split)));
            report(2, "ordering ablation", &results.last().unwrap().2);
        }
    }

    results.sort_by_key(|r| r.0);
    println!("acceptance summary:");
    for (id, name, out) in &results {
        report(*id, name, out);
    }
    if results.iter().all(|r| r.2.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
