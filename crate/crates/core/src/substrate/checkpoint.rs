//! JSON checkpointing for parameter sets.
//!
//! Layout: a version field first, then the optimizer step counter, then a
//! name -> {shape, values, moments} map.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};
use crate::substrate::optim::{Param, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    step: u64,
    params: std::collections::BTreeMap<String, Param>,
}

pub fn save_params(path: &Path, set: &ParamSet) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        step: set.step,
        params: set.raw().clone(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| ChoreoError::Checkpoint(format!("serialize: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let json = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&json)
        .map_err(|e| ChoreoError::Checkpoint(format!("parse {}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(ChoreoError::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {})",
            file.version, CHECKPOINT_VERSION
        )));
    }
    let mut set = ParamSet::new();
    set.step = file.step;
    for (name, param) in file.params {
        if param.m.shape != param.value.shape || param.v.shape != param.value.shape {
            return Err(ChoreoError::Checkpoint(format!(
                "moment shape mismatch for `{name}`"
            )));
        }
        set.raw_mut().insert(name, param);
    }
    Ok(set)
}
