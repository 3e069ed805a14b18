//! Coordinate-ordering ablation: train on column-permuted data and compare
//! round-trip error across orderings.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::round_trip_error;
use super::{Oracle, OracleForward, OracleOutput, RoundTrip};
use crate::bench::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::flow::{train_flow, FlowArch, FlowVariant, TrainConfig, TrainedFlow, DEFAULT_STEPS};
use crate::matrix::Matrix;
use crate::nn::Activation;
use crate::rng::{derive_seed, seeded};

/// A design and label column ordering; column `j` of the permuted data is
/// original column `perm[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ordering {
    pub id: usize,
    pub design_perm: Vec<usize>,
    pub label_perm: Vec<usize>,
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

impl Ordering {
    pub fn identity(id: usize, design_dim: usize, label_dim: usize) -> Self {
        Self {
            id,
            design_perm: (0..design_dim).collect(),
            label_perm: (0..label_dim).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.design_perm.iter().enumerate().all(|(i, &p)| i == p) && self.label_perm.iter().enumerate().all(|(i, &p)| i == p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<FlowVariant>,
    /// Random orderings, not counting the identity.
    pub orderings: usize,
    pub seeds: Vec<u64>,
    /// Prepend the identity ordering as ordering 0.
    pub include_identity: bool,
    pub permute_labels: bool,
    pub perm_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: vec![FlowVariant::Cfm, FlowVariant::DiagCfm],
            orderings: 4,
            seeds: vec![0, 1, 2],
            include_identity: false,
            permute_labels: true,
            perm_seed: 0,
            epochs: 30,
            batch_size: 512,
            learning_rate: 1e-3,
            hidden_widths: vec![256, 256, 256],
            activation: Activation::LeakyRelu,
            steps: DEFAULT_STEPS,
        }
    }
}

impl AblationConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_schedule: None,
            seed,
        }
    }

    pub fn arch(&self, variant: FlowVariant) -> FlowArch {
        FlowArch {
            variant,
            hidden_widths: self.hidden_widths.clone(),
            activation: self.activation,
            steps: self.steps,
        }
    }

    /// Identity (if requested) followed by seeded random orderings.
    pub fn orderings(&self, design_dim: usize, label_dim: usize) -> Vec<Ordering> {
        let mut out = Vec::new();
        if self.include_identity {
            out.push(Ordering::identity(0, design_dim, label_dim));
        }
        let mut rng = seeded(derive_seed(self.perm_seed, "ablation/orderings"));
        for _ in 0..self.orderings {
            let mut o = Ordering::identity(out.len(), design_dim, label_dim);
            o.design_perm.shuffle(&mut rng);
            if self.permute_labels {
                o.label_perm.shuffle(&mut rng);
            }
            out.push(o);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: FlowVariant,
    pub ordering_id: usize,
    pub seed: u64,
    pub round_trip: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadSummary {
    pub variant: FlowVariant,
    /// Mean round-trip error per ordering, in ordering order.
    pub ordering_means: Vec<f64>,
    pub min: f64,
    pub max: f64,
    /// `max / min` of the ordering means.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub orderings: Vec<Ordering>,
    pub rows: Vec<AblationRow>,
    pub spread: Vec<SpreadSummary>,
}

impl AblationReport {
    pub fn spread_of(&self, variant: FlowVariant) -> Option<&SpreadSummary> {
        self.spread.iter().find(|s| s.variant == variant)
    }
}

/// Trains a flow on `train` reordered by `ordering` and measures round-trip
/// error on `targets` (given in the original ordering). Generated designs are
/// mapped back to the original column order before the oracle sees them.
#[allow(clippy::too_many_arguments)]
pub fn train_and_round_trip(
    config: &TrainConfig,
    arch: &FlowArch,
    train: &Dataset,
    ordering: &Ordering,
    targets: &Matrix,
    cond: Option<&Matrix>,
    oracle: &OracleForward,
) -> Result<(TrainedFlow, RoundTrip)> {
    check_dim("ablation target width", train.label_dim(), targets.cols())?;
    let permuted = train.permute_columns(&ordering.design_perm, &ordering.label_perm)?;
    let trained = train_flow(config, arch, &permuted)?;
    let gen_seed = derive_seed(config.seed, "ablation/generate");
    let mut rt = round_trip_error(
        &trained.model,
        &PermutedOracle { oracle, ordering },
        &targets.select_columns(&ordering.label_perm),
        cond,
        gen_seed,
    )?;
    rt.designs = rt.designs.select_columns(&inverse(&ordering.design_perm));
    Ok((trained, rt))
}

/// Wraps an oracle so it accepts and returns permuted columns.
struct PermutedOracle<'a> {
    oracle: &'a OracleForward,
    ordering: &'a Ordering,
}

impl Oracle for PermutedOracle<'_> {
    fn label_dim(&self) -> usize {
        self.oracle.label_dim()
    }

    fn evaluate(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<OracleOutput> {
        let original = x.select_columns(&inverse(&self.ordering.design_perm));
        let mut out = self.oracle.evaluate(&original, cond)?;
        out.labels = out.labels.select_columns(&self.ordering.label_perm);
        Ok(out)
    }
}

/// Runs every (variant, ordering, seed) cell and summarizes the spread of
/// ordering means per variant.
pub fn permutation_ablation(
    cfg: &AblationConfig,
    train: &Dataset,
    targets: &Matrix,
    cond: Option<&Matrix>,
    oracle: &OracleForward,
) -> Result<AblationReport> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    let orderings = cfg.orderings(train.design_dim(), train.label_dim());
    if orderings.is_empty() {
        return Err(Error::config("ablation needs at least one ordering"));
    }
    let cells: Vec<(FlowVariant, &Ordering, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| orderings.iter().flat_map(move |o| cfg.seeds.iter().map(move |&s| (v, o, s))))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(variant, ordering, seed)| {
            let (trained, rt) = train_and_round_trip(&cfg.train_config(seed), &cfg.arch(variant), train, ordering, targets, cond, oracle)?;
            Ok(AblationRow {
                variant,
                ordering_id: ordering.id,
                seed,
                round_trip: rt.mean,
                final_loss: trained.history.last().map_or(f64::NAN, |e| e.mean_loss),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spread = cfg
        .variants
        .iter()
        .map(|&variant| {
            let ordering_means: Vec<f64> = orderings
                .iter()
                .map(|o| {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.variant == variant && r.ordering_id == o.id)
                        .map(|r| r.round_trip)
                        .collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                })
                .collect();
            let min = ordering_means.iter().copied().fold(f64::INFINITY, f64::min);
            let max = ordering_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            SpreadSummary {
                variant,
                ordering_means,
                min,
                max,
                ratio: max / min,
            }
        })
        .collect();
    Ok(AblationReport { orderings, rows, spread })
}
