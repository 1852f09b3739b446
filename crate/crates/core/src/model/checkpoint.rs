use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::autodiff::{Parameter, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "xmtrans-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<StoredTensor>,
}

pub fn checkpoint_to_string(params: &ModelParams) -> Result<String> {
    let stored = Stored {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        params: params
            .parameters()
            .iter()
            .map(|p| StoredTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&stored)?)
}

/// Parses a checkpoint and validates every tensor against the layout its
/// config implies.
pub fn checkpoint_from_str(text: &str) -> Result<ModelParams> {
    let stored: Stored = serde_json::from_str(text)?;
    if stored.format != CHECKPOINT_FORMAT || stored.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
            stored.format, stored.version
        )));
    }
    let params = stored
        .params
        .into_iter()
        .map(|t| {
            let value = Tensor::new(t.shape.clone(), t.values)
                .map_err(|_| Error::Schema(format!("tensor {} does not fill shape {:?}", t.name, t.shape)))?;
            Ok(Parameter::new(t.name, value))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_parameters(stored.config, params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint_to_string(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint_from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
