//! The five-module conversion architecture: a frozen speaker encoder, a
//! content encoder with a temporal bottleneck, a phonetic text encoder, an
//! acoustic stand-in for it, and a decoder that renders mel frames from
//! (content, speaker, linguistic) inputs. Training reconstructs clean
//! targets from degraded inputs; inference swaps the text encoder for the
//! acoustic one, so conversion needs no transcript.

mod ckpt;
mod data;
mod net;
mod train;

pub use ckpt::{load_model, save_model};
pub use data::{held_out_pairs, load_train_data, sample_batch, TrainData, UtteranceGroup};
pub use net::{
    convert, decode, encode_asr, encode_content, encode_phonetic, encode_speaker, Conversion,
};
pub use train::{
    compute_loss, loss_gradient_check, loss_gradients, mel_stats, train_step, LossReport,
    MelStats, UtterancePair,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::FeatureConfig;
use crate::corpus::{self, derive_seed};
use crate::dsp;
use crate::grad::{self, glorot_uniform, init_parameters, LayerSpec, Parameters, RecurrentCell};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("too few frames: got {got}, need at least {need}")]
    TooFewFrames { got: usize, need: usize },

    #[error("unknown phoneme symbol {0:?}")]
    UnknownPhoneme(String),

    #[error("phoneme inventory mismatch: sequence uses {got:?}, model was built for {expected:?}")]
    InventoryMismatch { got: String, expected: String },

    #[error("frame count mismatch: input has {input}, clean target has {target}")]
    FrameCountMismatch { input: usize, target: usize },

    #[error("sample rate mismatch: got {actual} Hz, model expects {expected} Hz")]
    SampleRateMismatch { actual: u32, expected: u32 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("model has no training steps; convert requires a trained checkpoint")]
    Untrained,

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("diverged")]
    Diverged,

    #[error(transparent)]
    Grad(#[from] grad::GradError),

    #[error(transparent)]
    Dsp(#[from] dsp::DspError),

    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Inputs to the speaker and acoustic encoders need at least this many
/// frames for the pooled features to mean anything.
pub const MIN_FRAMES: usize = 8;

/// Unit-norm speaker identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        // Both unit norm, so the dot product is the cosine.
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Temporally downsampled content bottleneck, row-major [rows, d_c].
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCode {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneticEmbedding(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct AsrEmbedding(pub Vec<f64>);

/// The decoder takes exactly one linguistic conditioning vector: the text
/// route during training, the acoustic route at inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Linguistic {
    Phonetic(PhoneticEmbedding),
    Asr(AsrEmbedding),
}

impl Linguistic {
    pub fn values(&self) -> &[f64] {
        match self {
            Linguistic::Phonetic(p) => &p.0,
            Linguistic::Asr(r) => &r.0,
        }
    }
}

/// Every knob of the architecture and its training objective. Stored inside
/// checkpoints, so a model file is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Speaker embedding width.
    pub d_s: usize,
    /// Content code width.
    pub d_c: usize,
    /// Phonetic/acoustic embedding width.
    pub d_p: usize,
    /// Temporal downsampling of the content bottleneck.
    pub ds_factor: usize,
    /// Hidden width of the encoder recurrent/conv layers.
    pub enc_hidden: usize,
    /// Hidden width of the decoder recurrent/conv layers.
    pub dec_hidden: usize,
    /// Phoneme embedding table width.
    pub emb_dim: usize,
    /// Weight of the phonetic distillation loss.
    pub beta: f64,
    /// Weight of the content consistency loss.
    pub lambda: f64,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Phoneme inventory the text encoder is built over.
    pub inventory_id: String,
    pub inventory: Vec<String>,
    pub features: FeatureConfig,
    /// Per-band feature normalization; empty means zeros / ones.
    pub mel_mean: Vec<f64>,
    pub mel_std: Vec<f64>,
    /// Phase reconstruction iterations for vocoded output.
    pub griffin_lim_iters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_s: 64,
            d_c: 32,
            d_p: 64,
            ds_factor: 16,
            enc_hidden: 32,
            dec_hidden: 64,
            emb_dim: 32,
            beta: 1.0,
            lambda: 1.0,
            seed: 0,
            inventory_id: String::new(),
            inventory: Vec::new(),
            features: FeatureConfig::default(),
            mel_mean: Vec::new(),
            mel_std: Vec::new(),
            griffin_lim_iters: 32,
        }
    }
}

impl ModelConfig {
    pub fn n_mels(&self) -> usize {
        self.features.mel.n_mels
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.beta < 0.0 || self.lambda < 0.0 {
            return bad(format!("beta and lambda must be >= 0, got {} / {}", self.beta, self.lambda));
        }
        for (name, v) in [
            ("d_s", self.d_s),
            ("d_c", self.d_c),
            ("d_p", self.d_p),
            ("ds_factor", self.ds_factor),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("emb_dim", self.emb_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.inventory.is_empty() {
            return bad("empty phoneme inventory".into());
        }
        let n = self.n_mels();
        for (name, v) in [("mel_mean", &self.mel_mean), ("mel_std", &self.mel_std)] {
            if !v.is_empty() && v.len() != n {
                return bad(format!("{name} has {} entries, expected {n}", v.len()));
            }
        }
        if self.mel_std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return bad("mel_std entries must be positive".into());
        }
        Ok(())
    }

    /// Layer declarations for everything except the phoneme table.
    fn architecture(&self) -> Vec<LayerSpec> {
        let gru = |name: &str, in_dim, hidden| LayerSpec::GruCell {
            name: name.into(),
            in_dim,
            hidden,
        };
        let lin = |name: &str, in_dim, out_dim| LayerSpec::Linear {
            name: name.into(),
            in_dim,
            out_dim,
        };
        let conv = |name: &str, i, o| LayerSpec::Conv1d {
            name: name.into(),
            in_channels: i,
            out_channels: o,
            kernel_size: 5,
        };
        let bidir = |name: &str, cell, in_dim, hidden| LayerSpec::BidirectionalRecurrent {
            name: name.into(),
            cell,
            in_dim,
            hidden,
        };
        let (m, h, hd) = (self.n_mels(), self.enc_hidden, self.dec_hidden);
        vec![
            gru("es.rnn", m, self.d_s),
            lin("es.proj", self.d_s, self.d_s),
            conv("ec.conv", m, h),
            bidir("ec.rnn", RecurrentCell::Gru, h, h),
            lin("ec.proj", 2 * h, self.d_c),
            gru("eph.rnn", self.emb_dim, h),
            lin("eph.proj", h, self.d_p),
            conv("easr.conv", m, h),
            bidir("easr.rnn", RecurrentCell::Lstm, h, h),
            lin("easr.proj", 2 * h, self.d_p),
            gru("dec.rnn", self.d_c + self.d_s + self.d_p, hd),
            conv("dec.conv", hd, hd),
            lin("dec.proj", hd, m),
        ]
    }
}

/// A constructed model: parameters plus the resolved config. The speaker
/// encoder is frozen the moment it is initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Parameters,
    pub trained_steps: u64,
    mel_mean: Vec<f64>,
    mel_std: Vec<f64>,
    symbol_index: BTreeMap<String, usize>,
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = init_parameters(&config.architecture(), config.seed);
        let mut emb_rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "eph.emb"));
        let vocab = config.inventory.len();
        params.insert(
            "eph.emb",
            glorot_uniform(&mut emb_rng, vec![vocab, config.emb_dim], vocab, config.emb_dim),
            true,
        );
        params.set_trainable("es.", false);
        Ok(ModelState::assemble(config, params, 0))
    }

    /// Wraps already-loaded parameters (checkpoint path); shapes must match
    /// the architecture the config describes.
    pub fn from_parts(config: ModelConfig, params: Parameters, trained_steps: u64) -> Result<Self> {
        config.validate()?;
        let expected = ModelState::new(config.clone())?;
        if expected.params.entries.len() != params.entries.len() {
            return Err(ModelError::InvalidConfig(format!(
                "checkpoint has {} parameters, architecture needs {}",
                params.entries.len(),
                expected.params.entries.len()
            )));
        }
        for (path, entry) in &expected.params.entries {
            let got = params
                .entries
                .get(path)
                .ok_or_else(|| ModelError::InvalidConfig(format!("checkpoint missing {path}")))?;
            if got.tensor.shape != entry.tensor.shape {
                return Err(ModelError::InvalidConfig(format!(
                    "checkpoint shape {:?} for {path}, architecture needs {:?}",
                    got.tensor.shape, entry.tensor.shape
                )));
            }
            if got.trainable != entry.trainable {
                return Err(ModelError::InvalidConfig(format!(
                    "trainable flag mismatch for {path}"
                )));
            }
        }
        Ok(ModelState::assemble(config, params, trained_steps))
    }

    fn assemble(config: ModelConfig, params: Parameters, trained_steps: u64) -> Self {
        let n = config.n_mels();
        let mel_mean = if config.mel_mean.is_empty() {
            vec![0.0; n]
        } else {
            config.mel_mean.clone()
        };
        let mel_std = if config.mel_std.is_empty() {
            vec![1.0; n]
        } else {
            config.mel_std.clone()
        };
        let symbol_index = config
            .inventory
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        ModelState {
            config,
            params,
            trained_steps,
            mel_mean,
            mel_std,
            symbol_index,
        }
    }

    pub(crate) fn symbol_to_index(&self, symbol: &str) -> Result<usize> {
        self.symbol_index
            .get(symbol)
            .copied()
            .ok_or_else(|| ModelError::UnknownPhoneme(symbol.to_string()))
    }

    /// The inventory the text encoder was built over, as a loadable table.
    pub fn inventory(&self) -> corpus::PhonemeInventory {
        corpus::PhonemeInventory {
            id: self.config.inventory_id.clone(),
            symbols: self.config.inventory.clone(),
        }
    }

    pub(crate) fn normalization(&self) -> (&[f64], &[f64]) {
        (&self.mel_mean, &self.mel_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid_config() -> ModelConfig {
        ModelConfig {
            inventory_id: "toy-v1".into(),
            inventory: vec!["sil".into(), "aa".into(), "bb".into()],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn construction_freezes_exactly_the_speaker_module() {
        let state = ModelState::new(valid_config()).unwrap();
        for (path, entry) in &state.params.entries {
            assert_eq!(
                entry.trainable,
                !path.starts_with("es."),
                "{path} trainable={}",
                entry.trainable
            );
        }
        assert!(state.params.entries.contains_key("eph.emb"));
        assert_eq!(
            state.params.get("eph.emb").unwrap().tensor.shape,
            vec![3, 32]
        );
        assert_eq!(state.trained_steps, 0);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = ModelState::new(valid_config()).unwrap();
        let b = ModelState::new(valid_config()).unwrap();
        assert_eq!(a, b);
        let different = ModelState::new(ModelConfig {
            seed: 1,
            ..valid_config()
        })
        .unwrap();
        assert_ne!(a.params, different.params);
    }

    #[test]
    fn config_validation_rejects_bad_weights_and_tables() {
        let bad_beta = ModelConfig {
            beta: -0.5,
            ..valid_config()
        };
        assert!(matches!(
            ModelState::new(bad_beta),
            Err(ModelError::InvalidConfig(_))
        ));

        let empty_inventory = ModelConfig {
            inventory: Vec::new(),
            ..valid_config()
        };
        assert!(ModelState::new(empty_inventory).is_err());

        let short_stats = ModelConfig {
            mel_mean: vec![0.0; 3],
            ..valid_config()
        };
        assert!(ModelState::new(short_stats).is_err());

        let bad_std = ModelConfig {
            mel_std: vec![0.0; 80],
            ..valid_config()
        };
        assert!(ModelState::new(bad_std).is_err());

        let zero_dim = ModelConfig {
            ds_factor: 0,
            ..valid_config()
        };
        assert!(ModelState::new(zero_dim).is_err());
    }

    #[test]
    fn symbol_lookup_follows_the_inventory() {
        let state = ModelState::new(valid_config()).unwrap();
        assert_eq!(state.symbol_to_index("aa").unwrap(), 1);
        assert!(matches!(
            state.symbol_to_index("zz"),
            Err(ModelError::UnknownPhoneme(s)) if s == "zz"
        ));
        let inventory = state.inventory();
        assert_eq!(inventory.id, "toy-v1");
        assert_eq!(inventory.len(), 3);
    }
}
