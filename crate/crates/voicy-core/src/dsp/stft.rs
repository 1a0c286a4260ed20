use std::sync::Arc;

use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{DspError, Result, Waveform};

/// Analysis/synthesis framing. `win_size` must divide into `hop_size`-sized
/// steps (constant overlap-add for the Hann window) and fit inside
/// `fft_size`; windowed frames are zero-padded on the right up to the FFT
/// length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_size: usize,
    pub hop_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 1024,
            win_size: 1024,
            hop_size: 256,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.win_size == 0 || self.hop_size == 0 {
            return Err(DspError::InvalidConfig(
                "fft_size, win_size and hop_size must be positive".into(),
            ));
        }
        if self.win_size > self.fft_size {
            return Err(DspError::InvalidConfig(format!(
                "win_size {} exceeds fft_size {}",
                self.win_size, self.fft_size
            )));
        }
        if self.hop_size > self.win_size {
            return Err(DspError::InvalidConfig(format!(
                "hop_size {} exceeds win_size {}",
                self.hop_size, self.win_size
            )));
        }
        if self.win_size % self.hop_size != 0 {
            return Err(DspError::InvalidConfig(format!(
                "win_size {} is not a multiple of hop_size {}",
                self.win_size, self.hop_size
            )));
        }
        Ok(())
    }

    /// Overlap-add additionally needs at least 2x window overlap, otherwise
    /// the Hann window leaves gaps in the synthesis envelope.
    fn validate_cola(&self) -> Result<()> {
        self.validate()?;
        if self.win_size / self.hop_size < 2 {
            return Err(DspError::InvalidConfig(format!(
                "win_size/hop_size ratio {} violates COLA for the Hann window (need >= 2)",
                self.win_size / self.hop_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for `len` input samples, or `None` below one window.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        if len < self.win_size {
            None
        } else {
            Some(1 + (len - self.win_size) / self.hop_size)
        }
    }

    /// Sample count synthesised from `n_frames` frames.
    pub fn synthesis_len(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            0
        } else {
            (n_frames - 1) * self.hop_size + self.win_size
        }
    }
}

/// Complex STFT frames, row-major `[n_frames x n_bins]`, bins `0..=fft/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Vec<Complex64>,
    pub n_frames: usize,
    pub n_bins: usize,
}

impl Spectrogram {
    pub fn frame(&self, m: usize) -> &[Complex64] {
        &self.data[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Per-bin power `|X|^2`, row-major `[n_frames x n_bins]`.
    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time Fourier transform. Frames are taken wholly inside the signal
/// (no padding), so `n_frames = 1 + (len - win) / hop`.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n_frames = cfg
        .n_frames(wave.len())
        .ok_or(DspError::InputTooShort {
            got: wave.len(),
            need: cfg.win_size,
        })?;
    let window = hann_window(cfg.win_size);
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.n_bins();

    let mut data = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for m in 0..n_frames {
        let start = m * cfg.hop_size;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.win_size {
                Complex64::new(wave.samples[start + i] * window[i], 0.0)
            } else {
                Complex64::default()
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..n_bins]);
    }

    Ok(Spectrogram {
        data,
        n_frames,
        n_bins,
    })
}

/// Least-squares inverse STFT: windowed overlap-add normalised by the
/// accumulated squared window. Output length is `(n_frames-1)*hop + win`;
/// reconstruction is exact away from the first/last window where the
/// envelope tapers.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate_cola()?;
    if spec.n_bins != cfg.n_bins() {
        return Err(DspError::ShapeMismatch(format!(
            "spectrogram has {} bins, config implies {}",
            spec.n_bins,
            cfg.n_bins()
        )));
    }
    let out_len = cfg.synthesis_len(spec.n_frames);
    let mut acc = vec![0.0f64; out_len];
    let mut wsum = vec![0.0f64; out_len];
    let window = hann_window(cfg.win_size);
    let ifft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_inverse(cfg.fft_size);
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];

    for m in 0..spec.n_frames {
        let frame = spec.frame(m);
        buf[..spec.n_bins].copy_from_slice(frame);
        for k in spec.n_bins..cfg.fft_size {
            buf[k] = frame[cfg.fft_size - k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = m * cfg.hop_size;
        for i in 0..cfg.win_size {
            let y = buf[i].re / cfg.fft_size as f64;
            acc[start + i] += y * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }

    // Normalise only where the synthesis envelope has real support; at the
    // outermost samples the Hann tail would otherwise amplify numerical
    // residue by orders of magnitude.
    let wmax = wsum.iter().cloned().fold(0.0f64, f64::max);
    let threshold = 1e-3 * wmax;
    for (a, w) in acc.iter_mut().zip(&wsum) {
        if *w > threshold {
            *a /= *w;
        }
    }
    Ok(Waveform::new(acc, super::DEFAULT_SAMPLE_RATE_HZ))
}
