//! Parameter file plus a JSON sidecar carrying the model role, dimensions,
//! vocabulary and provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Transformer};
use super::vocab::{Token, Vocab};
use super::RefinerError;
use crate::numerics::ParameterSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `refiner` or `worldmodel`.
    pub name: String,
    pub model: ModelConfig,
    pub vocab: BTreeMap<String, Token>,
    pub config_hash: String,
    pub seed: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(
    path: &Path,
    model: &Transformer,
    name: &str,
    config_hash: &str,
    seed: u64,
) -> Result<(), RefinerError> {
    model.params().save(path)?;
    let meta = CheckpointMeta {
        name: name.to_string(),
        model: *model.config(),
        vocab: Vocab::new().to_map(),
        config_hash: config_hash.to_string(),
        seed,
    };
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]. The role name and the
/// vocabulary must match; a differing config hash is reported to the caller
/// through the returned metadata.
pub fn load_checkpoint(path: &Path, expected_name: &str) -> Result<(Transformer, CheckpointMeta), RefinerError> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| RefinerError::Checkpoint(format!("sidecar: {e}")))?;
    if meta.name != expected_name {
        return Err(RefinerError::Checkpoint(format!(
            "expected a `{expected_name}` checkpoint, found `{}`",
            meta.name
        )));
    }
    if meta.vocab != Vocab::new().to_map() {
        return Err(RefinerError::Checkpoint("vocabulary differs from this build".into()));
    }
    let params = ParameterSet::load(path)?;
    let model = Transformer::from_params(meta.model, params)?;
    Ok((model, meta))
}
