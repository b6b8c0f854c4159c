use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{NetworkConfig, NetworkParams};

pub const CHECKPOINT_VERSION: u64 = 1;

/// JSON checkpoint. Floats are written with round-trip precision, so loading
/// restores parameters bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub params: NetworkParams,
    /// Optimizer moments, cluster models and records needed to resume.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Box<TrainState>>,
}

impl Checkpoint {
    pub fn new(params: &NetworkParams, network: &NetworkConfig, train: &TrainConfig) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            network: network.clone(),
            train: train.clone(),
            params: params.clone(),
            state: None,
        }
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(checkpoint)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |e: serde_json::Error| Error::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse {
            what: path.display().to_string(),
            message: "missing integer `format_version`".into(),
        })?;
    if found != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleVersion {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let checkpoint: Checkpoint = serde_json::from_value(value).map_err(parse)?;
    checkpoint.params.check_shapes(&checkpoint.network)?;
    Ok(checkpoint)
}
