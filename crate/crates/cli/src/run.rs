//! Shared plumbing for subcommands: output directory, provenance, manifest,
//! dataset and model loading.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use diagflow::bench::{sample_dtlz2_stratified, Dataset, DatasetSchema, NormStats};
use diagflow::eval::{InverseModel, OracleForward};
use diagflow::flow::FlowModel;
use diagflow::persist::{load_model, save_model_with, SavedModel};
use diagflow::report::{write_atomic, Provenance, Table};
use diagflow::rng::derive_seed;
use diagflow::{Error, Result};
use serde::Serialize;

use crate::config::{DatasetKind, OracleKind, RunConfig};

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const NORM_FILE: &str = "norm.json";

pub fn member_file(i: usize) -> String {
    format!("models/member_{i}.json")
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub config: RunConfig,
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub counters: BTreeMap<String, u64>,
}

/// One subcommand invocation.
pub struct Run {
    pub cfg: RunConfig,
    pub provenance: Provenance,
    manifest: RunManifest,
    phase_start: Instant,
}

impl Run {
    pub fn new(command: &str, cfg: RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out)?;
        let hash = cfg.hash();
        let provenance = Provenance::new(hash.clone(), cfg.seed);
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: hash,
            seed: cfg.seed,
            tool_version: provenance.tool_version.clone(),
            config: cfg.clone(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            metrics: BTreeMap::new(),
            counters: BTreeMap::new(),
        };
        Ok(Self {
            cfg,
            provenance,
            manifest,
            phase_start: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    pub fn comments(&self) -> Vec<String> {
        self.provenance.comment_lines()
    }

    /// Records the time since the previous phase ended.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.manifest
            .timings
            .insert(name.to_string(), (now - self.phase_start).as_secs_f64());
        self.phase_start = now;
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.manifest.metrics.insert(name.into(), value);
    }

    pub fn counter(&mut self, name: impl Into<String>, value: u64) {
        self.manifest.counters.insert(name.into(), value);
    }

    fn record(&mut self, name: &str) {
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.to_string());
        }
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<()> {
        table.write(&self.path(name), &self.comments())?;
        self.record(name);
        Ok(())
    }

    pub fn write_dataset(&mut self, name: &str, data: &Dataset) -> Result<()> {
        data.write_csv(&self.path(name), &self.comments())?;
        self.record(name);
        Ok(())
    }

    /// JSON object with a `provenance` field next to the payload's own fields.
    pub fn write_json<T: Serialize>(&mut self, name: &str, payload: &T) -> Result<()> {
        let mut value = serde_json::to_value(payload)?;
        if let Some(obj) = value.as_object_mut() {
            obj.insert("provenance".into(), serde_json::to_value(&self.provenance)?);
        }
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        write_atomic(&self.path(name), text.as_bytes())?;
        self.record(name);
        Ok(())
    }

    pub fn write_model(&mut self, name: &str, model: &SavedModel) -> Result<()> {
        save_model_with(&self.path(name), model, &self.provenance)?;
        self.record(name);
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let total: f64 = self.manifest.timings.values().sum();
        self.manifest.timings.insert("total".into(), total);
        let path = self.path(&format!("manifest_{}.json", self.manifest.command));
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Train and test splits, normalized when the config asks for it.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    /// Statistics the splits were normalized with.
    pub stats: Option<NormStats>,
    pub schema: DatasetSchema,
}

/// Raw (unnormalized) splits as described by the config.
pub fn raw_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, DatasetSchema)> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Dtlz2 => {
            let dtlz = d.dtlz2();
            let train = sample_dtlz2_stratified(&dtlz, d.n_train, derive_seed(cfg.seed, "data/train"))?;
            let test = sample_dtlz2_stratified(&dtlz, d.n_test, derive_seed(cfg.seed, "data/test"))?;
            let schema = DatasetSchema::from_names(&train.columns);
            Ok((train, test, schema))
        }
        DatasetKind::Csv => {
            let schema_path = d.schema.as_deref().expect("validated");
            let schema = DatasetSchema::load(schema_path)
                .map_err(|e| Error::Config(format!("schema {}: {e}", schema_path.display())))?;
            let train = Dataset::load_csv(d.train.as_deref().expect("validated"), &schema)?;
            let test = Dataset::load_csv(d.test.as_deref().expect("validated"), &schema)?;
            if train.len() < 2 || test.is_empty() {
                return Err(Error::Config("csv splits need >= 2 train rows and >= 1 test row".into()));
            }
            Ok((train, test, schema))
        }
    }
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let (train, test, schema) = raw_splits(cfg)?;
    if !cfg.dataset.normalize {
        return Ok(Splits {
            train,
            test,
            stats: None,
            schema,
        });
    }
    let stats = NormStats::fit(&train);
    Ok(Splits {
        train: train.normalize(&stats)?,
        test: test.normalize(&stats)?,
        stats: Some(stats),
        schema,
    })
}

/// The oracle described by the config, in the splits' (possibly normalized) space.
pub fn oracle(cfg: &RunConfig, splits: &Splits) -> Result<Option<OracleForward>> {
    let kind = match (cfg.oracle.kind, cfg.dataset.kind) {
        (OracleKind::Auto, DatasetKind::Dtlz2) => OracleKind::Dtlz2,
        (OracleKind::Auto, DatasetKind::Csv) => OracleKind::None,
        (k, _) => k,
    };
    match kind {
        OracleKind::Dtlz2 => Ok(Some(OracleForward::Dtlz2 {
            objectives: cfg.dataset.label_dim,
            stats: splits.stats.clone(),
        })),
        OracleKind::Surrogate => {
            let path = cfg.oracle.path.as_deref().expect("validated");
            match load_model(path)? {
                SavedModel::Mlp(m) => {
                    let want = splits.train.design_dim() + splits.train.cond_dim();
                    if m.input_dim() != want || m.output_dim() != splits.train.label_dim() {
                        return Err(Error::Config(format!(
                            "surrogate {} maps {} -> {}, dataset needs {} -> {}",
                            path.display(),
                            m.input_dim(),
                            m.output_dim(),
                            want,
                            splits.train.label_dim()
                        )));
                    }
                    Ok(Some(OracleForward::Surrogate(m)))
                }
                other => Err(Error::Config(format!(
                    "surrogate {} holds a '{}' model, expected 'mlp'",
                    path.display(),
                    other.kind()
                ))),
            }
        }
        OracleKind::None | OracleKind::Auto => Ok(None),
    }
}

pub fn require_oracle(oracle: Option<OracleForward>, task: &str) -> Result<OracleForward> {
    oracle.ok_or_else(|| {
        Error::Config(format!(
            "{task} needs an oracle forward model: use a dtlz2 dataset or set oracle.kind=surrogate with oracle.path"
        ))
    })
}

pub fn load_members(cfg: &RunConfig) -> Result<Vec<SavedModel>> {
    (0..cfg.train.ensemble)
        .map(|i| {
            let path = cfg.out.join(member_file(i));
            if !path.exists() {
                return Err(Error::Config(format!(
                    "model {} not found; run `train` with the same config first",
                    path.display()
                )));
            }
            load_model(&path)
        })
        .collect()
}

pub fn as_inverse(model: &SavedModel) -> Result<&dyn InverseModel> {
    match model {
        SavedModel::Flow(m) => Ok(m),
        SavedModel::Inn(m) => Ok(m),
        SavedModel::Mlp(_) => Err(Error::Config("an mlp file is not an inverse model".into())),
    }
}

pub fn as_flow(model: &SavedModel) -> Result<&FlowModel> {
    match model {
        SavedModel::Flow(m) => Ok(m),
        other => Err(Error::Config(format!(
            "this command needs flow models, found '{}'",
            other.kind()
        ))),
    }
}

pub fn check_model_dims(model: &dyn InverseModel, data: &Dataset) -> Result<()> {
    for (context, expected, got) in [
        ("model design width vs dataset", data.design_dim(), model.design_dim()),
        ("model label width vs dataset", data.label_dim(), model.label_dim()),
    ] {
        if expected != got {
            return Err(Error::Dimension { context, expected, got });
        }
    }
    Ok(())
}

/// First `n` rows (capped at the row count).
pub fn head_rows(m: &diagflow::Matrix, n: usize) -> diagflow::Matrix {
    let n = n.min(m.rows());
    m.select_rows(&(0..n).collect::<Vec<_>>())
}
