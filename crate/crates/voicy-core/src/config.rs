//! Shared run configuration: one TOML document that pins every knob of a
//! pipeline run so artifacts are reproducible from the file alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{MelConfig, StftConfig, DEFAULT_SAMPLE_RATE_HZ};
use crate::grad::AdamConfig;
use crate::model::ModelConfig;
use crate::scene::SamplerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config {path}: {detail}")]
    Parse { path: String, detail: String },
}

/// Feature extraction settings (framing + mel layout + sample rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub stft: StftConfig,
    pub mel: MelConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            stft: StftConfig::default(),
            mel: MelConfig::default(),
        }
    }
}

/// Training-loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Frames per training crop.
    pub crop_frames: usize,
    /// Checkpoint cadence in steps; the final step always checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 8,
            crop_frames: 128,
            checkpoint_every: 100,
        }
    }
}

/// Report settings for score evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Edges of the SNR report buckets, strictly increasing, in dB.
    pub snr_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snr_edges: vec![-5.0, 5.0, 15.0, 25.0, 35.0],
        }
    }
}

/// The full pipeline configuration. Every section has defaults, so an empty
/// document is a valid run config; command-line flags override file values
/// and the resolved union is written next to each run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed. Left unset it falls back to $VOICY_SEED, then 0.
    pub seed: Option<u64>,
    /// Worker threads; 1 forces serial execution, 0 uses every core.
    pub threads: Option<usize>,
    pub features: FeatureConfig,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}
