use rustfft::num_complex::Complex64;

use super::{istft, mel_filterbank, stft, DspError, MelConfig, MelSpectrogram};
use super::{Result, Spectrogram, StftConfig, Waveform};

const NNLS_ITERS: usize = 30;

/// Inverts log-mel features to linear STFT magnitudes. Per frame this solves
/// a non-negative least squares problem against the filterbank
/// (multiplicative updates), then takes the square root of the recovered
/// bin powers.
pub(crate) fn mel_to_magnitude(
    mel: &MelSpectrogram,
    stft_cfg: &StftConfig,
    mel_cfg: &MelConfig,
) -> Result<Vec<f64>> {
    if mel.n_mels != mel_cfg.n_mels {
        return Err(DspError::ShapeMismatch(format!(
            "mel has {} bands, config says {}",
            mel.n_mels, mel_cfg.n_mels
        )));
    }
    let fb = mel_filterbank(mel_cfg, stft_cfg.fft_size, mel.sample_rate_hz)?;
    let n_bins = stft_cfg.fft_size / 2 + 1;
    let n_mels = mel_cfg.n_mels;

    // Gram matrix of the filterbank, shared across frames.
    let mut gram = vec![0.0; n_bins * n_bins];
    for m in 0..n_mels {
        let row = &fb[m * n_bins..(m + 1) * n_bins];
        for i in 0..n_bins {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..n_bins {
                if row[j] != 0.0 {
                    gram[i * n_bins + j] += row[i] * row[j];
                }
            }
        }
    }

    let mut out = vec![0.0; mel.n_frames * n_bins];
    let mut x = vec![0.0; n_bins];
    let mut gx = vec![0.0; n_bins];
    for t in 0..mel.n_frames {
        let frame = mel.frame(t);
        // c = A^T b with b the per-band power.
        let mut c = vec![0.0; n_bins];
        for m in 0..n_mels {
            let b = frame[m].exp();
            let row = &fb[m * n_bins..(m + 1) * n_bins];
            for (ck, &w) in c.iter_mut().zip(row) {
                *ck += w * b;
            }
        }
        x.copy_from_slice(&c);
        for _ in 0..NNLS_ITERS {
            for (i, g) in gx.iter_mut().enumerate() {
                let grow = &gram[i * n_bins..(i + 1) * n_bins];
                *g = grow.iter().zip(&x).map(|(a, b)| a * b).sum();
            }
            for i in 0..n_bins {
                x[i] *= c[i] / (gx[i] + 1e-30);
            }
        }
        for (o, &p) in out[t * n_bins..(t + 1) * n_bins].iter_mut().zip(&*x) {
            *o = p.max(0.0).sqrt();
        }
    }
    Ok(out)
}

/// Griffin-Lim phase reconstruction from log-mel features. Phases start at
/// zero, so the result is fully deterministic; each iteration re-imposes the
/// target magnitudes on the phases of the current estimate and never
/// increases the spectral mismatch.
pub fn griffin_lim(
    mel: &MelSpectrogram,
    stft_cfg: &StftConfig,
    mel_cfg: &MelConfig,
    n_iters: usize,
) -> Result<Waveform> {
    if n_iters == 0 {
        return Err(DspError::InvalidConfig("n_iters must be >= 1".into()));
    }
    stft_cfg.validate()?;
    let magnitude = mel_to_magnitude(mel, stft_cfg, mel_cfg)?;
    let n_bins = stft_cfg.n_bins();
    let mut spec = Spectrogram {
        data: magnitude.iter().map(|&m| Complex64::new(m, 0.0)).collect(),
        n_frames: mel.n_frames,
        n_bins,
    };

    for _ in 0..n_iters {
        let wave = istft(&spec, stft_cfg)?;
        let estimate = stft(&wave, stft_cfg)?;
        for (s, (&target, y)) in spec
            .data
            .iter_mut()
            .zip(magnitude.iter().zip(&estimate.data))
        {
            let norm = y.norm();
            *s = if norm > 0.0 {
                y * (target / norm)
            } else {
                Complex64::new(target, 0.0)
            };
        }
    }

    let mut wave = istft(&spec, stft_cfg)?;
    wave.sample_rate_hz = mel.sample_rate_hz;
    Ok(wave)
}
