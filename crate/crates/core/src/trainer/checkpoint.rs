//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle is exact and identical runs produce identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::model::Model;

use super::{AdamConfig, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "prolap-ckpt v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub epoch: usize,
    pub step: usize,
    pub model: Model,
    pub adam: AdamConfig,
    pub seed: u64,
    pub deterministic: bool,
    pub preset: Option<String>,
    pub config: TrainConfig,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt-epoch-{epoch:04}.json")
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported checkpoint format `{}`", ck.format),
            });
        }
        Ok(ck)
    }
}
