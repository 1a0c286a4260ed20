use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Result, SceneError};
use crate::dsp::Waveform;

/// Outcome of scaling a noise source against a reference signal.
#[derive(Debug, Clone)]
pub struct NoiseMixResult {
    pub mixed: Waveform,
    pub achieved_snr_db: f64,
    pub noise_scale: f64,
}

pub(crate) fn tile_to_len(samples: &[f64], len: usize) -> Vec<f64> {
    samples.iter().copied().cycle().take(len).collect()
}

/// Scales `noise` so its power sits `target_snr_db` below `signal`, then
/// adds it. Noise shorter than the signal is tiled, longer noise truncated.
pub fn mix_at_snr(signal: &Waveform, noise: &Waveform, target_snr_db: f64) -> Result<NoiseMixResult> {
    if signal.sample_rate_hz != noise.sample_rate_hz {
        return Err(SceneError::SampleRateMismatch {
            a: signal.sample_rate_hz,
            b: noise.sample_rate_hz,
        });
    }
    let p_signal = signal.power();
    if p_signal == 0.0 {
        return Err(SceneError::ZeroPower("signal"));
    }
    let tiled = tile_to_len(&noise.samples, signal.len());
    let p_noise = tiled.iter().map(|s| s * s).sum::<f64>() / tiled.len().max(1) as f64;
    if p_noise == 0.0 {
        return Err(SceneError::ZeroPower("noise"));
    }

    let noise_scale = (p_signal / (p_noise * 10f64.powf(target_snr_db / 10.0))).sqrt();
    let mixed = Waveform::new(
        signal
            .samples
            .iter()
            .zip(&tiled)
            .map(|(s, n)| s + noise_scale * n)
            .collect(),
        signal.sample_rate_hz,
    );
    let achieved_snr_db = estimate_snr(signal, &mixed)?;
    Ok(NoiseMixResult {
        mixed,
        achieved_snr_db,
        noise_scale,
    })
}

/// Reference-based SNR: `10 log10(P_clean / P_(degraded - clean))` over the
/// full utterance.
pub fn estimate_snr(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(SceneError::LengthMismatch {
            a: clean.len(),
            b: degraded.len(),
        });
    }
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(SceneError::ZeroPower("clean reference"));
    }
    let p_residual = clean
        .samples
        .iter()
        .zip(&degraded.samples)
        .map(|(c, d)| (d - c) * (d - c))
        .sum::<f64>()
        / clean.len() as f64;
    if p_residual == 0.0 {
        return Err(SceneError::InfiniteSnr);
    }
    Ok(10.0 * (p_clean / p_residual).log10())
}

/// Seeded unit-variance Gaussian noise.
pub fn white_noise(len: usize, sample_rate_hz: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let samples = (0..len)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Waveform::new(samples, sample_rate_hz)
}

/// Seeded stand-in for recorded background noise: a sum of slowly
/// amplitude-modulated resonant noise streams. Spectrally coloured and
/// non-stationary, unlike [`white_noise`]. RMS normalised to 0.1.
pub fn babble_noise(len: usize, sample_rate_hz: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let fs = sample_rate_hz as f64;
    let mut sum = vec![0.0f64; len];
    for _ in 0..8 {
        let freq = rng.gen_range(150.0..2500.0);
        let bw = rng.gen_range(80.0..300.0);
        let am_freq = rng.gen_range(1.5..6.0);
        let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);

        // Two-pole resonator driven by white noise.
        let r = (-std::f64::consts::PI * bw / fs).exp();
        let theta = std::f64::consts::TAU * freq / fs;
        let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
        let (mut y1, mut y2) = (0.0f64, 0.0f64);
        for (i, slot) in sum.iter_mut().enumerate() {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y = x + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            let t = i as f64 / fs;
            let am = 1.0 + 0.8 * (std::f64::consts::TAU * am_freq * t + am_phase).sin();
            *slot += y * am;
        }
    }
    let wave = Waveform::new(sum, sample_rate_hz);
    let rms = wave.rms();
    let scale = if rms > 0.0 { 0.1 / rms } else { 0.0 };
    Waveform::new(
        wave.samples.iter().map(|s| s * scale).collect(),
        sample_rate_hz,
    )
}
