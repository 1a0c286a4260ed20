//! Model checkpoints: the parameter container plus a TOML manifest carrying
//! the config and step counter, so a file alone reconstructs the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grad::{load_checkpoint, save_checkpoint, Checkpoint, GradError, OptimizerState};

use super::{ModelConfig, ModelError, ModelState, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    trained_steps: u64,
    config: ModelConfig,
}

pub fn save_model(
    path: &Path,
    state: &ModelState,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let manifest = ModelManifest {
        trained_steps: state.trained_steps,
        config: state.config.clone(),
    };
    let manifest = toml::to_string(&manifest)
        .map_err(|e| GradError::Checkpoint(format!("manifest serialization: {e}")))?;
    let ckpt = Checkpoint {
        params: state.params.clone(),
        optimizer: optimizer.cloned(),
        manifest,
    };
    save_checkpoint(path, &ckpt)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelState, Option<OptimizerState>)> {
    let ckpt = load_checkpoint(path)?;
    let manifest: ModelManifest = toml::from_str(&ckpt.manifest).map_err(|e| {
        ModelError::Grad(GradError::Checkpoint(format!("manifest parse: {e}")))
    })?;
    let state = ModelState::from_parts(manifest.config, ckpt.params, manifest.trained_steps)?;
    Ok((state, ckpt.optimizer))
}
