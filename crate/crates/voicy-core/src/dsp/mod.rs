//! Waveform front end: WAV I/O, STFT analysis/synthesis, log-mel features
//! and Griffin-Lim phase reconstruction.
//!
//! All audio is mono `f64` in `[-1, 1]`. The pipeline sample rate is
//! [`DEFAULT_SAMPLE_RATE_HZ`]; files at other rates are rejected at
//! ingestion rather than resampled.

mod griffin_lim;
mod mel;
mod stft;
mod wav;

pub use griffin_lim::griffin_lim;
pub use mel::{
    hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, read_mel, write_mel, MelConfig,
    MelSpectrogram,
};
pub use stft::{hann_window, istft, stft, Spectrogram, StftConfig};
pub use wav::{read_wav, read_wav_expecting, write_wav, WavFormat};

use thiserror::Error;

/// Pipeline-wide sample rate in Hz.
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 24_000;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sample rate mismatch: {path} has {actual} Hz, expected {expected} Hz")]
    SampleRateMismatch {
        path: String,
        actual: u32,
        expected: u32,
    },

    #[error("unsupported wav encoding in {path}: {detail}")]
    UnsupportedWav { path: String, detail: String },

    #[error("wav error for {path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad mel file {path}: {detail}")]
    BadMelFile { path: String, detail: String },

    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DspError>;

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Waveform {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean squared sample value.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}
