//! Run configuration: JSON file, dotted `--set` overrides, validation and hashing.

use std::path::{Path, PathBuf};

use diagflow::bench::Dtlz2Config;
use diagflow::eval::OodConfig;
use diagflow::flow::{FlowArch, FlowVariant, StepSchedule, TrainConfig, DEFAULT_STEPS};
use diagflow::inn::{InnArch, InnLossWeights, InnObjective};
use diagflow::nn::Activation;
use diagflow::uq::UqMetric;
use diagflow::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Dtlz2,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub design_dim: usize,
    pub label_dim: usize,
    pub g_max: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    /// Min-max normalize with statistics fitted on the training split.
    pub normalize: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Dtlz2,
            design_dim: 12,
            label_dim: 3,
            g_max: 2.0,
            n_train: 100_000,
            n_test: 5_000,
            train: None,
            test: None,
            schema: None,
            normalize: true,
        }
    }
}

impl DatasetSpec {
    pub fn dtlz2(&self) -> Dtlz2Config {
        Dtlz2Config {
            design_dim: self.design_dim,
            label_dim: self.label_dim,
            g_max: self.g_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Flow,
    Inn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub variant: FlowVariant,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub blocks: usize,
    pub clamp: f64,
    pub loss_weights: InnLossWeights,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Flow,
            variant: FlowVariant::DiagCfm,
            hidden_widths: vec![512, 512, 512],
            activation: Activation::LeakyRelu,
            steps: DEFAULT_STEPS,
            blocks: 4,
            clamp: 2.0,
            loss_weights: InnLossWeights::default(),
        }
    }
}

impl ModelSpec {
    pub fn flow_arch(&self) -> FlowArch {
        FlowArch {
            variant: self.variant,
            hidden_widths: self.hidden_widths.clone(),
            activation: self.activation,
            steps: self.steps,
        }
    }

    pub fn inn_arch(&self) -> InnArch {
        InnArch {
            blocks: self.blocks,
            hidden_widths: self.hidden_widths.clone(),
            activation: self.activation,
            clamp: self.clamp,
        }
    }

    pub fn inn_objective(&self) -> InnObjective {
        InnObjective {
            weights: self.loss_weights,
            ..InnObjective::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: Option<StepSchedule>,
    /// Members trained with seeds `seed + 0 .. seed + ensemble - 1`.
    pub ensemble: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 1000,
            learning_rate: 1e-3,
            lr_schedule: None,
            ensemble: 5,
        }
    }
}

impl TrainSpec {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_schedule: self.lr_schedule,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// DTLZ2 for generated datasets, none for CSV data.
    Auto,
    Dtlz2,
    Surrogate,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub kind: OracleKind,
    /// Saved MLP mapping normalized `[x; cond]` to normalized labels.
    pub path: Option<PathBuf>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            kind: OracleKind::Auto,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSpec {
    pub n_targets: usize,
    pub round_trip: bool,
    pub diversity_targets: usize,
    pub k: usize,
    pub epsilons: Vec<f64>,
}

impl Default for EvaluateSpec {
    fn default() -> Self {
        Self {
            n_targets: 1000,
            round_trip: true,
            diversity_targets: 200,
            k: 10,
            epsilons: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqSpec {
    pub metrics: Vec<UqMetric>,
    pub select_best: bool,
    pub select_targets: usize,
    pub k: usize,
    pub rejection: bool,
    pub rejection_targets: usize,
    pub rejection_rates: Vec<f64>,
    pub ood: bool,
    pub ood_config: OodConfig,
}

impl Default for UqSpec {
    fn default() -> Self {
        Self {
            metrics: UqMetric::ALL.to_vec(),
            select_best: true,
            select_targets: 500,
            k: 10,
            rejection: true,
            rejection_targets: 1000,
            rejection_rates: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            ood: true,
            ood_config: OodConfig {
                n_in: 1000,
                n_ood: 1000,
                ..OodConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSpec {
    pub variants: Vec<FlowVariant>,
    pub orderings: usize,
    /// Seeds `seed + 0 .. seed + runs - 1` per cell.
    pub runs: usize,
    pub include_identity: bool,
    pub permute_labels: bool,
    pub n_targets: usize,
}

impl Default for AblateSpec {
    fn default() -> Self {
        Self {
            variants: vec![FlowVariant::Cfm, FlowVariant::DiagCfm],
            orderings: 4,
            runs: 3,
            include_identity: false,
            permute_labels: true,
            n_targets: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub oracle: OracleSpec,
    pub evaluate: EvaluateSpec,
    pub uq: UqSpec,
    pub ablate: AblateSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            oracle: OracleSpec::default(),
            evaluate: EvaluateSpec::default(),
            uq: UqSpec::default(),
            ablate: AblateSpec::default(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Error {
    Error::Config(message.into())
}

/// Sets `path` (dot separated) inside `root`, creating objects on the way.
/// The value is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override '{assignment}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("override key '{key}' has an empty segment")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    if !node.is_object() {
        *node = Value::Object(Default::default());
    }
    node.as_object_mut()
        .expect("object")
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// File (if any) then overrides, then validation.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Dtlz2 => {
                self.dataset.dtlz2().validate()?;
                if d.n_train < 2 || d.n_test < 1 {
                    return Err(config_error("dataset needs n_train >= 2 and n_test >= 1"));
                }
            }
            DatasetKind::Csv => {
                if d.train.is_none() || d.test.is_none() || d.schema.is_none() {
                    return Err(config_error("csv datasets need dataset.train, dataset.test and dataset.schema"));
                }
            }
        }
        self.train.config(self.seed).validate()?;
        if self.train.ensemble == 0 {
            return Err(config_error("train.ensemble must be >= 1"));
        }
        if self.model.hidden_widths.is_empty() || self.model.hidden_widths.contains(&0) {
            return Err(config_error("model.hidden_widths must be non-empty and positive"));
        }
        if self.model.steps == 0 {
            return Err(config_error("model.steps must be >= 1"));
        }
        if self.model.kind == ModelKind::Inn && self.model.blocks == 0 {
            return Err(config_error("model.blocks must be >= 1"));
        }
        if self.oracle.kind == OracleKind::Surrogate && self.oracle.path.is_none() {
            return Err(config_error("oracle.kind = surrogate needs oracle.path"));
        }
        if self.oracle.kind == OracleKind::Dtlz2 && d.kind != DatasetKind::Dtlz2 {
            return Err(config_error("oracle.kind = dtlz2 needs a dtlz2 dataset"));
        }
        if self.evaluate.k < 2 || self.uq.k < 2 {
            return Err(config_error("candidate count k must be >= 2"));
        }
        if self.evaluate.epsilons.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_error("evaluate.epsilons must be ascending"));
        }
        if let Some(r) = self.uq.rejection_rates.iter().find(|r| !(0.0..=0.5).contains(*r)) {
            return Err(config_error(format!("rejection rate {r} outside [0, 0.5]")));
        }
        if self.ablate.runs == 0 || self.ablate.variants.is_empty() {
            return Err(config_error("ablate needs runs >= 1 and at least one variant"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything except the output path.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_then_strings() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "train.epochs=7".into(),
                "model.variant=cfm".into(),
                "model.hidden_widths=[8,8]".into(),
                "out=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.variant, FlowVariant::Cfm);
        assert_eq!(cfg.model.hidden_widths, vec![8, 8]);
        assert_eq!(cfg.out, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            RunConfig::resolve(None, &["train.epoch=3".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::resolve(None, &["noequals".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn csv_dataset_needs_paths() {
        assert!(RunConfig::resolve(None, &["dataset.kind=csv".into()]).is_err());
    }
}
