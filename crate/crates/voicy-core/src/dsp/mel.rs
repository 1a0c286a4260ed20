use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{stft, DspError, Result, StftConfig, Waveform};

/// Log-mel feature extraction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Power floor applied before the log.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 80,
            f_min_hz: 50.0,
            f_max_hz: 12_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(DspError::InvalidConfig("n_mels must be positive".into()));
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz) {
            return Err(DspError::InvalidConfig(format!(
                "need 0 <= f_min < f_max, got {} and {}",
                self.f_min_hz, self.f_max_hz
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(DspError::InvalidConfig(
                "log_floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, row-major `[n_mels x (fft/2 + 1)]`. Filters are
/// evenly spaced on the mel scale between `f_min_hz` and `f_max_hz`; weights
/// are exactly zero outside that band.
pub fn mel_filterbank(cfg: &MelConfig, fft_size: usize, sample_rate_hz: u32) -> Result<Vec<f64>> {
    cfg.validate()?;
    let nyquist = sample_rate_hz as f64 / 2.0;
    if cfg.f_max_hz > nyquist {
        return Err(DspError::InvalidConfig(format!(
            "f_max {} Hz exceeds Nyquist {} Hz",
            cfg.f_max_hz, nyquist
        )));
    }
    let n_bins = fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.f_min_hz);
    let mel_hi = hz_to_mel(cfg.f_max_hz);
    let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| {
            // Pin the outer edges exactly so the zero-outside-band guarantee
            // survives the mel round trip.
            if i == 0 {
                cfg.f_min_hz
            } else if i == cfg.n_mels + 1 {
                cfg.f_max_hz
            } else {
                mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64)
            }
        })
        .collect();

    let mut fb = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate_hz as f64 / fft_size as f64;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb[m * n_bins + k] = w;
        }
    }
    Ok(fb)
}

/// Log-power mel features, row-major `[n_frames x n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop_size: usize,
    pub sample_rate_hz: u32,
}

impl MelSpectrogram {
    pub fn frame(&self, m: usize) -> &[f64] {
        &self.values[m * self.n_mels..(m + 1) * self.n_mels]
    }
}

/// Natural log of floored mel-band power:
/// `log(max(filterbank . |STFT|^2, log_floor))`.
pub fn mel_spectrogram(
    wave: &Waveform,
    stft_cfg: &StftConfig,
    mel_cfg: &MelConfig,
) -> Result<MelSpectrogram> {
    let fb = mel_filterbank(mel_cfg, stft_cfg.fft_size, wave.sample_rate_hz)?;
    let spec = stft(wave, stft_cfg)?;
    let n_bins = spec.n_bins;
    let mut values = Vec::with_capacity(spec.n_frames * mel_cfg.n_mels);
    let mut power = vec![0.0; n_bins];
    for m in 0..spec.n_frames {
        for (p, c) in power.iter_mut().zip(spec.frame(m)) {
            *p = c.norm_sqr();
        }
        for row in 0..mel_cfg.n_mels {
            let w = &fb[row * n_bins..(row + 1) * n_bins];
            let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
            values.push(e.max(mel_cfg.log_floor).ln());
        }
    }
    Ok(MelSpectrogram {
        values,
        n_frames: spec.n_frames,
        n_mels: mel_cfg.n_mels,
        hop_size: stft_cfg.hop_size,
        sample_rate_hz: wave.sample_rate_hz,
    })
}

const MEL_MAGIC: &[u8; 4] = b"VMEL";
const MEL_VERSION: u32 = 1;

/// Writes a mel matrix as a flat little-endian binary file: magic, version,
/// n_frames, n_mels, hop_size, sample_rate (u32 each), then row-major f64
/// values. Byte-identical output for identical input.
pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let io_err = |source| DspError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes =
        Vec::with_capacity(4 + 5 * 4 + mel.values.len() * 8);
    bytes.extend_from_slice(MEL_MAGIC);
    for v in [
        MEL_VERSION,
        mel.n_frames as u32,
        mel.n_mels as u32,
        mel.hop_size as u32,
        mel.sample_rate_hz,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &mel.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(io_err)
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let display = path.display().to_string();
    let bad = |detail: &str| DspError::BadMelFile {
        path: display.clone(),
        detail: detail.to_string(),
    };
    let bytes = std::fs::read(path).map_err(|source| DspError::Io {
        path: display.clone(),
        source,
    })?;
    if bytes.len() < 24 || &bytes[..4] != MEL_MAGIC {
        return Err(bad("missing VMEL header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if u32_at(4) != MEL_VERSION {
        return Err(bad("unsupported version"));
    }
    let n_frames = u32_at(8) as usize;
    let n_mels = u32_at(12) as usize;
    let expected = 24 + n_frames * n_mels * 8;
    if bytes.len() != expected {
        return Err(bad("payload length does not match the header"));
    }
    let values = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(MelSpectrogram {
        values,
        n_frames,
        n_mels,
        hop_size: u32_at(16) as usize,
        sample_rate_hz: u32_at(20),
    })
}
