//! Versioned JSON model files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::inn::InnModel;
use crate::nn::MlpModel;
use crate::report::{write_atomic, Provenance};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum SavedModel {
    Mlp(MlpModel),
    Flow(FlowModel),
    Inn(InnModel),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Mlp(_) => "mlp",
            SavedModel::Flow(_) => "flow",
            SavedModel::Inn(_) => "inn",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    #[serde(flatten)]
    model: SavedModel,
}

pub fn to_json(model: &SavedModel) -> Result<String> {
    to_json_with(model, None)
}

/// Like [`to_json`], with an embedded provenance record.
pub fn to_json_with(model: &SavedModel, provenance: Option<&Provenance>) -> Result<String> {
    Ok(serde_json::to_string(&ModelFile {
        format_version: FORMAT_VERSION,
        provenance: provenance.cloned(),
        model: model.clone(),
    })?)
}

pub fn from_json(text: &str) -> Result<SavedModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::config(format!(
            "unsupported model format_version {} (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    Ok(file.model)
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    write_atomic(path, to_json(model)?.as_bytes())
}

pub fn save_model_with(path: &Path, model: &SavedModel, provenance: &Provenance) -> Result<()> {
    write_atomic(path, to_json_with(model, Some(provenance))?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    from_json(&std::fs::read_to_string(path)?)
}
