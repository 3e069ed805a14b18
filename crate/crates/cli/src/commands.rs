//! Subcommand bodies.

use std::path::Path;

use diagflow::bench::{ColumnNames, ColumnRole, DatasetSchema, NormStats};
use diagflow::eval::{
    candidate_pool, diversity_of_groups, diversity_vs_epsilon_from, error_rejection, forward_mse, generate_candidates,
    generate_ood_targets, ood_detection, permutation_ablation, round_trip_error, select_best, AblationConfig,
    Oracle,
};
use diagflow::flow::{train_flow, FlowModel, FlowVariant, VelocityField};
use diagflow::inn::train_inn;
use diagflow::matrix::Matrix;
use diagflow::ode::synthesize;
use diagflow::persist::SavedModel;
use diagflow::report::{fmt_f64, Table};
use diagflow::rng::derive_seed;
use diagflow::uq::{score_synthesis, Ensemble, LabelStandardizer, ScoreRequest, UqMetric, UqScores};
use diagflow::{Error, Result};
use serde::Deserialize;

use crate::config::{DatasetKind, ModelKind};
use crate::run::{
    as_flow, as_inverse, check_model_dims, head_rows, load_members, load_splits, member_file, oracle, raw_splits, require_oracle,
    Run, NORM_FILE, SCHEMA_FILE, TEST_FILE, TRAIN_FILE,
};

pub fn gen_data(run: &mut Run) -> Result<()> {
    if run.cfg.dataset.kind != DatasetKind::Dtlz2 {
        return Err(Error::Config("gen-data needs dataset.kind = dtlz2".into()));
    }
    let (train, test, schema) = raw_splits(&run.cfg)?;
    run.phase("generate");
    run.write_dataset(TRAIN_FILE, &train)?;
    run.write_dataset(TEST_FILE, &test)?;
    run.write_json(SCHEMA_FILE, &schema)?;
    run.metric("n_train", train.len() as f64);
    run.metric("n_test", test.len() as f64);
    run.phase("write");
    Ok(())
}

pub fn train(run: &mut Run) -> Result<()> {
    let splits = load_splits(&run.cfg)?;
    run.phase("load");
    if let Some(stats) = &splits.stats {
        run.write_json(NORM_FILE, stats)?;
    }
    let mut losses = Table::new(["member", "seed", "epoch", "lr", "mean_loss"]);
    for i in 0..run.cfg.train.ensemble {
        let seed = run.cfg.seed + i as u64;
        let tc = run.cfg.train.config(seed);
        let (model, history) = match run.cfg.model.kind {
            ModelKind::Flow => {
                let t = train_flow(&tc, &run.cfg.model.flow_arch(), &splits.train)?;
                (SavedModel::Flow(t.model), t.history)
            }
            ModelKind::Inn => {
                let t = train_inn(&tc, &run.cfg.model.inn_arch(), &run.cfg.model.inn_objective(), &splits.train)?;
                (SavedModel::Inn(t.model), t.history)
            }
        };
        for e in &history {
            losses.push([i.to_string(), seed.to_string(), e.epoch.to_string(), fmt_f64(e.lr), fmt_f64(e.mean_loss)]);
        }
        if let Some(last) = history.last() {
            run.metric(format!("final_loss/member_{i}"), last.mean_loss);
        }
        let test_mse = forward_mse(as_inverse(&model)?, &splits.test.x, &splits.test.y, splits.test.cond.as_ref())?;
        run.metric(format!("test_forward_mse/member_{i}"), test_mse.mean);
        run.write_model(&member_file(i), &model)?;
        run.phase(&format!("train/member_{i}"));
    }
    run.write_table("losses.csv", &losses)?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn evaluate(run: &mut Run) -> Result<()> {
    let splits = load_splits(&run.cfg)?;
    let oracle = oracle(&run.cfg, &splits)?;
    let oracle = if run.cfg.evaluate.round_trip {
        Some(require_oracle(oracle, "round-trip evaluation")?)
    } else {
        oracle
    };
    let members = load_members(&run.cfg)?;
    run.phase("load");
    let test = &splits.test;
    let ev = run.cfg.evaluate.clone();
    let rt_targets = head_rows(&test.y, ev.n_targets);
    let rt_cond = test.cond.as_ref().map(|c| head_rows(c, ev.n_targets));
    let div_targets = head_rows(&test.y, ev.diversity_targets);
    let div_cond = test.cond.as_ref().map(|c| head_rows(c, ev.diversity_targets));

    let mut fwd_rows = Table::new(["run", "sample_id", "sq_error"]);
    let mut rt_rows = Table::new(["run", "sample_id", "sq_error"]);
    let mut eps_rows = Table::new(["run", "epsilon", "diversity", "mean_valid"]);
    let (mut fwd, mut rt, mut div, mut clipped) = (Vec::new(), Vec::new(), Vec::new(), 0u64);
    for (r, saved) in members.iter().enumerate() {
        let model = as_inverse(saved)?;
        check_model_dims(model, test)?;
        let seed = run.cfg.seed + r as u64;
        let f = forward_mse(model, &test.x, &test.y, test.cond.as_ref())?;
        for (i, e) in f.per_sample.iter().enumerate() {
            fwd_rows.push([r.to_string(), i.to_string(), fmt_f64(*e)]);
        }
        fwd.push(f.mean);
        let designs = generate_candidates(model, &div_targets, div_cond.as_ref(), ev.k, derive_seed(seed, "evaluate/diversity"))?;
        div.push(diversity_of_groups(&designs, ev.k)?);
        if let Some(oracle) = &oracle {
            let t = round_trip_error(model, oracle, &rt_targets, rt_cond.as_ref(), derive_seed(seed, "evaluate/round_trip"))?;
            for (i, e) in t.errors.iter().enumerate() {
                rt_rows.push([r.to_string(), i.to_string(), fmt_f64(*e)]);
            }
            rt.push(t.mean);
            clipped += t.clipped as u64;
            let c = div_cond.as_ref().map(|c| c.repeat_rows(ev.k));
            let labels = oracle.evaluate(&designs, c.as_ref())?.labels;
            let errors = labels.row_sq_dists(&div_targets.repeat_rows(ev.k))?;
            for p in diversity_vs_epsilon_from(&designs, &errors, ev.k, &ev.epsilons)? {
                eps_rows.push([r.to_string(), fmt_f64(p.epsilon), opt_cell(p.diversity), fmt_f64(p.mean_valid)]);
            }
        }
        run.phase(&format!("evaluate/run_{r}"));
    }

    let mut summary = Table::new(["metric", "mean", "std", "n_runs"]);
    for (name, values) in [("forward_mse", &fwd), ("round_trip_error", &rt), ("diversity", &div)] {
        if values.is_empty() {
            continue;
        }
        let (m, s) = mean_std(values);
        summary.push([name.to_string(), fmt_f64(m), fmt_f64(s), values.len().to_string()]);
        run.metric(name, m);
    }
    run.counter("clipped_designs", clipped);
    run.write_table("evaluate_summary.csv", &summary)?;
    run.write_table("forward_per_sample.csv", &fwd_rows)?;
    if oracle.is_some() {
        run.write_table("round_trip_per_sample.csv", &rt_rows)?;
        run.write_table("diversity_epsilon.csv", &eps_rows)?;
    }
    Ok(())
}

/// Scores only the requested metrics, dropping the rest.
fn keep_requested(scores: &UqScores, metrics: &[UqMetric]) -> Vec<(String, Vec<f64>)> {
    metrics
        .iter()
        .filter_map(|&m| scores.get(m).map(|s| (m.name().to_string(), s.to_vec())))
        .collect()
}

fn borrowed(named: &[(String, Vec<f64>)]) -> Vec<(String, &[f64])> {
    named.iter().map(|(n, v)| (n.clone(), v.as_slice())).collect()
}

pub fn uq(run: &mut Run) -> Result<()> {
    let spec = run.cfg.uq.clone();
    let splits = load_splits(&run.cfg)?;
    let oracle = oracle(&run.cfg, &splits)?;
    let members = load_members(&run.cfg)?;
    let flows: Vec<FlowModel> = members.iter().map(|m| as_flow(m).cloned()).collect::<Result<_>>()?;
    let reference = &flows[0];
    check_model_dims(reference, &splits.test)?;
    let wants = |m: UqMetric| spec.metrics.contains(&m);
    if wants(UqMetric::ZeroDev) && reference.dims().variant != FlowVariant::DiagCfm {
        return Err(Error::UnsupportedMetric("zero_dev"));
    }
    let ensemble = if wants(UqMetric::EnsVar) {
        if flows.len() < 2 {
            return Err(Error::Config(format!(
                "ens_var needs an ensemble (train.ensemble >= 2), found {} member",
                flows.len()
            )));
        }
        Some(Ensemble::new(flows.clone(), 0)?)
    } else {
        None
    };
    let standardizer = if splits.schema.labels_prestandardized {
        LabelStandardizer::unit(splits.train.label_dim())
    } else {
        LabelStandardizer::fit(&splits.train.y)?
    };
    let request = ScoreRequest {
        self_cons: wants(UqMetric::SelfCons),
        fm_loss: wants(UqMetric::FmLoss),
        ensemble: ensemble.as_ref().map(|e| (e, &standardizer)),
    };
    run.phase("load");
    let test = &splits.test;
    let seed = run.cfg.seed;
    let mut zero_dev_evals = 0u64;
    let mut synthesis_evals = 0u64;

    if spec.select_best {
        let oracle = require_oracle(oracle.clone(), "select-best")?;
        let targets = head_rows(&test.y, spec.select_targets);
        let cond = test.cond.as_ref().map(|c| head_rows(c, spec.select_targets));
        let pool = candidate_pool(reference, request, &oracle, &targets, cond.as_ref(), spec.k, derive_seed(seed, "uq/select_best"))?;
        zero_dev_evals += pool.zero_dev_evals;
        synthesis_evals += pool.synthesis_evals;
        let named = keep_requested(&pool.scores, &spec.metrics);
        let sb = select_best(&pool.errors, spec.k, &borrowed(&named))?;
        let mut t = Table::new(["method", "pearson", "selected_mean", "improvement"]);
        t.push(["random".to_string(), String::new(), fmt_f64(sb.random_mean), "0".to_string()]);
        t.push(["oracle".to_string(), String::new(), fmt_f64(sb.oracle_mean), fmt_f64(sb.oracle_improvement)]);
        for m in &sb.metrics {
            t.push([m.metric.clone(), opt_cell(m.pearson), fmt_f64(m.selected_mean), fmt_f64(m.improvement)]);
            run.metric(format!("select_best/{}/improvement", m.metric), m.improvement);
        }
        run.write_table("select_best.csv", &t)?;
        run.phase("select_best");
    }

    if spec.rejection {
        let oracle = require_oracle(oracle.clone(), "error rejection")?;
        let targets = head_rows(&test.y, spec.rejection_targets);
        let cond = test.cond.as_ref().map(|c| head_rows(c, spec.rejection_targets));
        let pool = candidate_pool(reference, request, &oracle, &targets, cond.as_ref(), 1, derive_seed(seed, "uq/rejection"))?;
        zero_dev_evals += pool.zero_dev_evals;
        synthesis_evals += pool.synthesis_evals;
        let named = keep_requested(&pool.scores, &spec.metrics);
        let curve = error_rejection(&pool.errors, &borrowed(&named), &spec.rejection_rates, derive_seed(seed, "uq/rejection"))?;
        let mut t = Table::new(["method", "rate", "retained_mean", "reduction"]);
        let push = |t: &mut Table, name: &str, values: &[f64]| {
            for (rate, v) in curve.rates.iter().zip(values) {
                t.push([name.to_string(), fmt_f64(*rate), fmt_f64(*v), fmt_f64(curve.reduction(*v))]);
            }
        };
        push(&mut t, "oracle", &curve.oracle);
        push(&mut t, "random", &curve.random);
        for m in &curve.metrics {
            push(&mut t, &m.metric, &m.retained_mean);
        }
        run.write_table("rejection.csv", &t)?;
        let mut scores = Table::new(["sample_id", "zero_dev", "self_cons", "ens_var", "fm_loss", "error"]);
        for i in 0..pool.errors.len() {
            let cell = |m: UqMetric| opt_cell(spec.metrics.contains(&m).then(|| pool.scores.get(m).map(|s| s[i])).flatten());
            scores.push([
                i.to_string(),
                cell(UqMetric::ZeroDev),
                cell(UqMetric::SelfCons),
                cell(UqMetric::EnsVar),
                cell(UqMetric::FmLoss),
                fmt_f64(pool.errors[i]),
            ]);
        }
        run.write_table("scores.csv", &scores)?;
        run.phase("rejection");
    }

    if spec.ood {
        let set = generate_ood_targets(&splits.train.y, &test.y, &spec.ood_config)?;
        if test.cond.is_some() {
            return Err(Error::Config("OOD targets are not defined for conditioned datasets".into()));
        }
        let score = |targets: &Matrix, role: &str| -> Result<(UqScores, u64)> {
            let before = reference.network_evals();
            let syn = synthesize(reference, targets, None, None, derive_seed(seed, role))?;
            let evals = reference.network_evals() - before;
            Ok((score_synthesis(reference, &syn, targets, None, request)?, evals))
        };
        let (in_scores, e1) = score(&set.in_dist, "uq/ood/in")?;
        let (ood_scores, e2) = score(&set.ood, "uq/ood/ood")?;
        synthesis_evals += e1 + e2;
        let keep = |s: UqScores| UqScores {
            zero_dev: s.zero_dev.filter(|_| wants(UqMetric::ZeroDev)),
            self_cons: s.self_cons,
            ens_var: s.ens_var,
            fm_loss: s.fm_loss,
        };
        let report = ood_detection(&keep(in_scores), &keep(ood_scores))?;
        let mut t = Table::new(["metric", "auc", "n_in", "n_ood"]);
        let mut roc = Table::new(["metric", "fpr", "tpr"]);
        for m in &report {
            t.push([m.metric.clone(), fmt_f64(m.auc), set.in_dist.rows().to_string(), set.ood.rows().to_string()]);
            for (fpr, tpr) in &m.roc {
                roc.push([m.metric.clone(), fmt_f64(*fpr), fmt_f64(*tpr)]);
            }
            run.metric(format!("ood/{}/auc", m.metric), m.auc);
        }
        run.counter("ood_band_points", set.band_count as u64);
        run.write_table("ood.csv", &t)?;
        run.write_table("ood_roc.csv", &roc)?;
        run.phase("ood");
    }
    run.counter("synthesis_network_evals", synthesis_evals);
    run.counter("zero_dev_extra_network_evals", zero_dev_evals);
    Ok(())
}

pub fn ablate(run: &mut Run) -> Result<()> {
    let splits = load_splits(&run.cfg)?;
    let oracle = require_oracle(oracle(&run.cfg, &splits)?, "the ordering ablation")?;
    let spec = run.cfg.ablate.clone();
    let model = &run.cfg.model;
    let cfg = AblationConfig {
        variants: spec.variants.clone(),
        orderings: spec.orderings,
        seeds: (0..spec.runs as u64).map(|r| run.cfg.seed + r).collect(),
        include_identity: spec.include_identity,
        permute_labels: spec.permute_labels,
        perm_seed: run.cfg.seed,
        epochs: run.cfg.train.epochs,
        batch_size: run.cfg.train.batch_size,
        learning_rate: run.cfg.train.learning_rate,
        hidden_widths: model.hidden_widths.clone(),
        activation: model.activation,
        steps: model.steps,
    };
    let targets = head_rows(&splits.test.y, spec.n_targets);
    let cond = splits.test.cond.as_ref().map(|c| head_rows(c, spec.n_targets));
    run.phase("load");
    let report = permutation_ablation(&cfg, &splits.train, &targets, cond.as_ref(), &oracle)?;
    run.phase("ablate");
    let mut rows = Table::new(["variant", "ordering_id", "seed", "final_round_trip", "final_loss"]);
    for r in &report.rows {
        rows.push([r.variant.to_string(), r.ordering_id.to_string(), r.seed.to_string(), fmt_f64(r.round_trip), fmt_f64(r.final_loss)]);
    }
    let mut spread = Table::new(["variant", "min_ordering_mean", "max_ordering_mean", "ratio"]);
    for s in &report.spread {
        spread.push([s.variant.to_string(), fmt_f64(s.min), fmt_f64(s.max), fmt_f64(s.ratio)]);
        run.metric(format!("spread_ratio/{}", s.variant), s.ratio);
    }
    let join = |p: &[usize]| p.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut orderings = Table::new(["ordering_id", "design_perm", "label_perm"]);
    for o in &report.orderings {
        orderings.push([o.id.to_string(), join(&o.design_perm), join(&o.label_perm)]);
    }
    run.write_table("ablation.csv", &rows)?;
    run.write_table("ablation_spread.csv", &spread)?;
    run.write_table("ablation_orderings.csv", &orderings)?;
    Ok(())
}

#[derive(Deserialize)]
struct NormFile {
    #[serde(flatten)]
    stats: NormStats,
}

fn load_norm(run: &Run) -> Result<Option<NormStats>> {
    if !run.cfg.dataset.normalize {
        return Ok(None);
    }
    let path = run.path(NORM_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: {e}; run `train` first", path.display())))?;
    Ok(Some(serde_json::from_str::<NormFile>(&text)?.stats))
}

/// Named columns from a CSV with optional `#` comment lines.
fn read_columns(path: &Path, names: &[String]) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header = reader.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header.iter().position(|h| h == n).ok_or_else(|| Error::Parse {
                row: 0,
                column: n.clone(),
                message: format!("column missing from {}", path.display()),
            })
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (&i, name) in idx.iter().zip(names) {
            let cell = rec.get(i).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: name.clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, names.len(), data)
}

/// Column names for the configured dataset without loading the data.
fn column_names(run: &Run) -> Result<ColumnNames> {
    match run.cfg.dataset.kind {
        DatasetKind::Dtlz2 => {
            let probe = diagflow::bench::sample_dtlz2_stratified(&run.cfg.dataset.dtlz2(), 1, 0)?;
            Ok(probe.columns)
        }
        DatasetKind::Csv => {
            let path = run.cfg.dataset.train.as_deref().expect("validated");
            let schema = DatasetSchema::load(run.cfg.dataset.schema.as_deref().expect("validated"))?;
            let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
            let header = reader.headers()?.clone();
            let mut names = ColumnNames::default();
            for h in header.iter() {
                match schema.columns.get(h) {
                    Some(ColumnRole::Design) => names.design.push(h.to_string()),
                    Some(ColumnRole::Label) => names.label.push(h.to_string()),
                    Some(ColumnRole::Condition) => names.condition.push(h.to_string()),
                    None => {}
                }
            }
            Ok(names)
        }
    }
}

fn stream_setup(run: &Run) -> Result<(SavedModel, Option<NormStats>, ColumnNames)> {
    let mut members = load_members(&run.cfg)?;
    Ok((members.swap_remove(0), load_norm(run)?, column_names(run)?))
}

/// Designs for every target row of `input`.
pub fn generate(run: &mut Run, input: &Path, output: &str) -> Result<()> {
    let (saved, stats, names) = stream_setup(run)?;
    let model = as_inverse(&saved)?;
    let mut y = read_columns(input, &names.label)?;
    let mut cond = if names.condition.is_empty() {
        None
    } else {
        Some(read_columns(input, &names.condition)?)
    };
    if let Some(s) = &stats {
        y = s.normalize_labels(&y)?;
        cond = cond.map(|c| s.normalize_cond(&c)).transpose()?;
    }
    run.phase("load");
    let mut x = model.generate(&y, cond.as_ref(), derive_seed(run.cfg.seed, "generate"))?;
    if let Some(s) = &stats {
        x = s.denormalize_design(&x)?;
    }
    write_matrix(run, output, &names.design, &x)?;
    run.phase("generate");
    Ok(())
}

/// Label predictions for every design row of `input`.
pub fn predict(run: &mut Run, input: &Path, output: &str) -> Result<()> {
    let (saved, stats, names) = stream_setup(run)?;
    let model = as_inverse(&saved)?;
    let mut x = read_columns(input, &names.design)?;
    let mut cond = if names.condition.is_empty() {
        None
    } else {
        Some(read_columns(input, &names.condition)?)
    };
    if let Some(s) = &stats {
        x = s.normalize_design(&x)?;
        cond = cond.map(|c| s.normalize_cond(&c)).transpose()?;
    }
    run.phase("load");
    let mut y = model.predict(&x, cond.as_ref())?;
    if let Some(s) = &stats {
        y = s.denormalize_labels(&y)?;
    }
    write_matrix(run, output, &names.label, &y)?;
    run.phase("predict");
    Ok(())
}

fn write_matrix(run: &mut Run, output: &str, names: &[String], m: &Matrix) -> Result<()> {
    let mut t = Table::new(std::iter::once("sample_id".to_string()).chain(names.iter().cloned()));
    for r in 0..m.rows() {
        t.push(std::iter::once(r.to_string()).chain(m.row(r).iter().map(|v| fmt_f64(*v))));
    }
    run.write_table(output, &t)
}
