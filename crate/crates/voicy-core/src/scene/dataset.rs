use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    babble_noise, estimate_snr, render_scene_with_reference, simulate_rir, Result, SceneError,
    ScenePlacement, ShoeboxRoom, SPEED_OF_SOUND_M_S,
};
use crate::corpus::{
    derive_seed, load_alignment_rows, load_manifest, write_manifest, Condition, CorpusManifest,
    ManifestRecord,
};
use crate::dsp::{read_wav_expecting, write_wav, WavFormat, Waveform, DEFAULT_SAMPLE_RATE_HZ};

/// Distribution settings for random scenes. Defaults model furnished
/// domestic rooms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub dims_min_m: [f64; 3],
    pub dims_max_m: [f64; 3],
    pub max_order: usize,
    pub t60_range_s: (f64, f64),
    pub snr_mean_db: f64,
    pub snr_sd_db: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub wall_margin_m: f64,
    pub min_speech_mic_dist_m: f64,
    /// WAV files to draw external noise from; empty means the bundled
    /// synthetic babble generator.
    pub external_noise_paths: Vec<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            dims_min_m: [3.0, 3.0, 2.4],
            dims_max_m: [8.0, 8.0, 3.5],
            max_order: 20,
            t60_range_s: (0.12, 1.25),
            snr_mean_db: 16.0,
            snr_sd_db: 7.0,
            snr_min_db: -2.2,
            snr_max_db: 35.0,
            wall_margin_m: 0.3,
            min_speech_mic_dist_m: 0.5,
            external_noise_paths: Vec::new(),
        }
    }
}

/// Per-utterance noise levels: one combined SNR target split across the two
/// noise channels.
#[derive(Debug, Clone, Copy)]
pub struct SnrDraw {
    pub combined_db: f64,
    pub white_db: f64,
    pub external_db: f64,
}

pub fn sample_t60(rng: &mut ChaCha20Rng, cfg: &SamplerConfig) -> f64 {
    rng.gen_range(cfg.t60_range_s.0..=cfg.t60_range_s.1)
}

/// Draws room dimensions and inverts Sabine's formula so the room's
/// absorption realises `t60_s`. Dims are resampled while the implied
/// absorption falls outside (0.02, 0.95); after 32 tries it is clamped.
pub fn sample_room_for_t60(rng: &mut ChaCha20Rng, cfg: &SamplerConfig, t60_s: f64) -> ShoeboxRoom {
    let mut room = ShoeboxRoom {
        dims: [0.0; 3],
        absorption: 1.0,
        max_order: cfg.max_order,
    };
    for _ in 0..32 {
        for a in 0..3 {
            room.dims[a] = rng.gen_range(cfg.dims_min_m[a]..=cfg.dims_max_m[a]);
        }
        room.absorption = 1.0;
        let alpha = 0.161 * room.volume() / (room.surface_area() * t60_s);
        if alpha > 0.02 && alpha < 0.95 {
            room.absorption = alpha;
            return room;
        }
        room.absorption = alpha;
    }
    room.absorption = room.absorption.clamp(0.02, 0.95);
    room
}

pub fn sample_placement(
    rng: &mut ChaCha20Rng,
    room: &ShoeboxRoom,
    cfg: &SamplerConfig,
) -> ScenePlacement {
    let point = |rng: &mut ChaCha20Rng| {
        let mut p = [0.0; 3];
        for (a, v) in p.iter_mut().enumerate() {
            *v = rng.gen_range(cfg.wall_margin_m..room.dims[a] - cfg.wall_margin_m);
        }
        p
    };
    let mic_pos = point(rng);
    let mut speech_pos = point(rng);
    for _ in 0..64 {
        let d: f64 = (0..3)
            .map(|a| (speech_pos[a] - mic_pos[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        if d >= cfg.min_speech_mic_dist_m {
            break;
        }
        speech_pos = point(rng);
    }
    ScenePlacement {
        speech_pos,
        white_noise_pos: point(rng),
        external_noise_pos: point(rng),
        mic_pos,
    }
}

/// Truncated-normal combined SNR (kept 0.1 dB inside the configured bounds
/// so cross-channel interaction cannot push the measured value outside),
/// split randomly between the white and external channels.
pub fn sample_snr_split(rng: &mut ChaCha20Rng, cfg: &SamplerConfig) -> SnrDraw {
    let lo = cfg.snr_min_db + 0.1;
    let hi = cfg.snr_max_db - 0.1;
    let mut combined = (lo + hi) / 2.0;
    for _ in 0..1000 {
        let z: f64 = StandardNormal.sample(rng);
        let x = cfg.snr_mean_db + cfg.snr_sd_db * z;
        if x >= lo && x <= hi {
            combined = x;
            break;
        }
    }
    let f: f64 = rng.gen_range(0.2..0.8);
    SnrDraw {
        combined_db: combined,
        white_db: combined - 10.0 * f.log10(),
        external_db: combined - 10.0 * (1.0 - f).log10(),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Time-aligns a convolved signal with its dry original: drops the
/// direct-path delay and truncates the tail to the dry length.
fn align_to_dry(convolved: &Waveform, dry_len: usize, delay: usize) -> Waveform {
    let samples = convolved
        .samples
        .iter()
        .skip(delay)
        .take(dry_len)
        .copied()
        .collect();
    Waveform::new(samples, convolved.sample_rate_hz)
}

fn rms_match(wave: &Waveform, target_rms: f64) -> (Waveform, f64) {
    let rms = wave.rms();
    let g = if rms > 0.0 { target_rms / rms } else { 1.0 };
    (
        Waveform::new(wave.samples.iter().map(|s| s * g).collect(), wave.sample_rate_hz),
        g,
    )
}

fn direct_delay_samples(placement: &ScenePlacement, fs: u32) -> usize {
    let d: f64 = (0..3)
        .map(|a| (placement.speech_pos[a] - placement.mic_pos[a]).powi(2))
        .sum::<f64>()
        .sqrt();
    (d / SPEED_OF_SOUND_M_S * fs as f64).round() as usize
}

struct UtteranceOutput {
    records: Vec<ManifestRecord>,
}

fn error_record(input: &ManifestRecord, condition: Condition, detail: String) -> ManifestRecord {
    ManifestRecord {
        id: input.id.clone(),
        speaker_id: input.speaker_id.clone(),
        condition,
        audio_path: input.audio_path.clone(),
        alignment_path: input.alignment_path.clone(),
        snr_db: None,
        t60_s: None,
        seed: None,
        error: Some(detail),
    }
}

fn degrade_utterance(
    input: &ManifestRecord,
    in_dir: &Path,
    out_dir: &Path,
    cfg: &SamplerConfig,
    utt_seed: u64,
) -> UtteranceOutput {
    let fail = |detail: String| UtteranceOutput {
        records: vec![
            error_record(input, Condition::Reverb, detail.clone()),
            error_record(input, Condition::NoisyReverb, detail),
        ],
    };

    let clean = match read_wav_expecting(
        &resolve(in_dir, &input.audio_path),
        DEFAULT_SAMPLE_RATE_HZ,
    ) {
        Ok(w) => w,
        Err(e) => return fail(e.to_string()),
    };
    let align_src = resolve(in_dir, &input.alignment_path);
    if let Err(e) = load_alignment_rows(&align_src) {
        return fail(e.to_string());
    }

    let fs = clean.sample_rate_hz;
    let clean_rms = clean.rms();
    let mut rng = ChaCha20Rng::seed_from_u64(utt_seed);
    let mut records = Vec::with_capacity(3);

    // Self-contained output: copy audio and alignment alongside the derived
    // conditions.
    let align_name = format!("{}.tsv", input.id);
    let clean_name = format!("{}_clean.wav", input.id);
    if let Err(e) = std::fs::copy(&align_src, out_dir.join(&align_name)) {
        return fail(format!("copy alignment: {e}"));
    }
    if let Err(e) = write_wav(&out_dir.join(&clean_name), &clean, WavFormat::Pcm16) {
        return fail(e.to_string());
    }
    records.push(ManifestRecord {
        id: input.id.clone(),
        speaker_id: input.speaker_id.clone(),
        condition: Condition::Clean,
        audio_path: clean_name,
        alignment_path: align_name.clone(),
        snr_db: None,
        t60_s: None,
        seed: Some(utt_seed),
        error: None,
    });

    // Reverberant-only condition.
    let t60_reverb = sample_t60(&mut rng, cfg);
    let room = sample_room_for_t60(&mut rng, cfg, t60_reverb);
    let placement = sample_placement(&mut rng, &room, cfg);
    let reverb_result = simulate_rir(&room, placement.speech_pos, placement.mic_pos, fs)
        .and_then(|rir| super::apply_rir(&clean, &rir));
    match reverb_result {
        Ok(full) => {
            let delay = direct_delay_samples(&placement, fs);
            let aligned = align_to_dry(&full, clean.len(), delay);
            let (matched, _) = rms_match(&aligned, clean_rms);
            let name = format!("{}_reverb.wav", input.id);
            match write_wav(&out_dir.join(&name), &matched, WavFormat::Pcm16) {
                Ok(()) => records.push(ManifestRecord {
                    id: input.id.clone(),
                    speaker_id: input.speaker_id.clone(),
                    condition: Condition::Reverb,
                    audio_path: name,
                    alignment_path: align_name.clone(),
                    snr_db: None,
                    t60_s: Some(t60_reverb),
                    seed: Some(utt_seed),
                    error: None,
                }),
                Err(e) => records.push(error_record(input, Condition::Reverb, e.to_string())),
            }
        }
        Err(e) => records.push(error_record(input, Condition::Reverb, e.to_string())),
    }

    // Noisy-reverberant condition: its own room, plus two noise channels.
    let t60_noisy = sample_t60(&mut rng, cfg);
    let room = sample_room_for_t60(&mut rng, cfg, t60_noisy);
    let placement = sample_placement(&mut rng, &room, cfg);
    let snr = sample_snr_split(&mut rng, cfg);
    let noise = if cfg.external_noise_paths.is_empty() {
        Ok(babble_noise(
            clean.len(),
            fs,
            derive_seed(utt_seed, "babble"),
        ))
    } else {
        let pick = rng.gen_range(0..cfg.external_noise_paths.len());
        read_wav_expecting(&cfg.external_noise_paths[pick], fs).map_err(SceneError::from)
    };
    let noisy_result = noise.and_then(|noise| {
        render_scene_with_reference(
            &room,
            &placement,
            &clean,
            &noise,
            snr.white_db,
            snr.external_db,
            derive_seed(utt_seed, "white"),
        )
    });
    match noisy_result {
        Ok((mixed_full, reverberant_full)) => {
            let delay = direct_delay_samples(&placement, fs);
            let mixed = align_to_dry(&mixed_full, clean.len(), delay);
            let reference = align_to_dry(&reverberant_full, clean.len(), delay);
            let achieved = estimate_snr(&reference, &mixed);
            let (matched, _) = rms_match(&mixed, clean_rms);
            let name = format!("{}_noisy_reverb.wav", input.id);
            let write = write_wav(&out_dir.join(&name), &matched, WavFormat::Pcm16);
            match (achieved, write) {
                (Ok(achieved), Ok(())) => records.push(ManifestRecord {
                    id: input.id.clone(),
                    speaker_id: input.speaker_id.clone(),
                    condition: Condition::NoisyReverb,
                    audio_path: name,
                    alignment_path: align_name,
                    snr_db: Some(achieved),
                    t60_s: Some(t60_noisy),
                    seed: Some(utt_seed),
                    error: None,
                }),
                (Err(e), _) => {
                    records.push(error_record(input, Condition::NoisyReverb, e.to_string()))
                }
                (_, Err(e)) => {
                    records.push(error_record(input, Condition::NoisyReverb, e.to_string()))
                }
            }
        }
        Err(e) => records.push(error_record(input, Condition::NoisyReverb, e.to_string())),
    }

    UtteranceOutput { records }
}

/// Expands a clean-only manifest into the three-condition training corpus.
/// Every utterance gets an RIR-only reverberant rendition and a
/// noisy-reverberant rendition (its own random scene, white + external
/// noise); all derived audio is time-aligned with the clean original and
/// level-matched to its RMS, so per-condition feature frames line up.
/// Failures are recorded per entry and do not stop the run.
pub fn build_dataset(
    manifest_in: &Path,
    out_dir: &Path,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<CorpusManifest> {
    let input = load_manifest(manifest_in).map_err(|e| SceneError::InvalidRoom(e.to_string()))?;
    std::fs::create_dir_all(out_dir).map_err(|e| {
        SceneError::InvalidRoom(format!("cannot create {}: {e}", out_dir.display()))
    })?;
    let in_dir = manifest_in.parent().unwrap_or(Path::new(".")).to_path_buf();

    let clean_inputs: Vec<&ManifestRecord> = input.by_condition(Condition::Clean).collect();
    let outputs: Vec<UtteranceOutput> = clean_inputs
        .par_iter()
        .map(|record| {
            let utt_seed = derive_seed(seed, &record.id);
            degrade_utterance(record, &in_dir, out_dir, cfg, utt_seed)
        })
        .collect();

    let manifest = CorpusManifest {
        records: outputs.into_iter().flat_map(|o| o.records).collect(),
        toy_spec_hash: input.toy_spec_hash.clone(),
    };
    write_manifest(&manifest, &out_dir.join("manifest.jsonl"))
        .map_err(|e| SceneError::InvalidRoom(e.to_string()))?;
    Ok(manifest)
}
