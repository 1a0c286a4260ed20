use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    derive_seed, write_alignment, write_inventory, write_manifest, AlignmentRow, Condition,
    CorpusError, CorpusManifest, ManifestRecord, PhonemeInventory, Result,
};
use crate::dsp::{write_wav, WavFormat, Waveform, DEFAULT_SAMPLE_RATE_HZ};

pub const TOY_INVENTORY_ID: &str = "toy-v1";
const SILENCE_SYMBOL: &str = "sil";

/// Parameters of the synthetic corpus generator. Hash the spec with
/// [`toy_spec_hash`]; equal hashes guarantee byte-identical corpora.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Number of non-silence phonemes K; the inventory adds one silence
    /// symbol on top.
    pub inventory_size: usize,
    pub segment_duration_ms: (f64, f64),
    pub segments_per_utterance: (usize, usize),
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            n_speakers: 4,
            utterances_per_speaker: 20,
            inventory_size: 8,
            segment_duration_ms: (80.0, 160.0),
            segments_per_utterance: (3, 8),
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(CorpusError::InvalidSpec(
                "need at least one speaker and one utterance".into(),
            ));
        }
        if self.inventory_size == 0 {
            return Err(CorpusError::InvalidSpec("inventory_size must be > 0".into()));
        }
        let (lo, hi) = self.segment_duration_ms;
        if !(lo > 0.0 && hi >= lo) {
            return Err(CorpusError::InvalidSpec(format!(
                "bad segment duration range ({lo}, {hi})"
            )));
        }
        let (slo, shi) = self.segments_per_utterance;
        if slo == 0 || shi < slo {
            return Err(CorpusError::InvalidSpec(format!(
                "bad segments-per-utterance range ({slo}, {shi})"
            )));
        }
        Ok(())
    }
}

/// Canonical hash of the spec (hex SHA-256 of its JSON form).
pub fn toy_spec_hash(spec: &ToyCorpusSpec) -> String {
    let json = serde_json::to_string(spec).expect("spec serialises");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The silence symbol plus `k` pseudo-phonemes `p0..p{k-1}`.
pub fn toy_inventory(k: usize) -> PhonemeInventory {
    let mut symbols = vec![SILENCE_SYMBOL.to_string()];
    symbols.extend((0..k).map(|i| format!("p{i}")));
    PhonemeInventory {
        id: TOY_INVENTORY_ID.into(),
        symbols,
    }
}

/// A speaker is a fixed vocal-tract colouring: pitch plus three formant
/// resonators applied to every phoneme excitation.
#[derive(Debug, Clone, Copy)]
struct SpeakerVoice {
    f0_hz: f64,
    formants_hz: [f64; 3],
    formant_bw_hz: [f64; 3],
}

fn speaker_voice(spec: &ToyCorpusSpec, speaker_idx: usize) -> SpeakerVoice {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, &format!("speaker{speaker_idx}")));
    SpeakerVoice {
        f0_hz: (rng.gen_range(90f64.ln()..260f64.ln())).exp(),
        formants_hz: [
            rng.gen_range(350.0..850.0),
            rng.gen_range(1100.0..2300.0),
            rng.gen_range(2700.0..4200.0),
        ],
        formant_bw_hz: [
            rng.gen_range(80.0..180.0),
            rng.gen_range(90.0..200.0),
            rng.gen_range(120.0..260.0),
        ],
    }
}

/// A phoneme is a fixed excitation character, shared by all speakers:
/// voiced phonemes are sawtooth pulses emphasised at a phoneme-specific
/// resonance, unvoiced ones are noise through a phoneme-specific band.
#[derive(Debug, Clone, Copy)]
struct PhonemeUnit {
    voiced: bool,
    center_hz: f64,
    bw_hz: f64,
}

fn phoneme_unit(k: usize, inventory_size: usize) -> PhonemeUnit {
    let n = inventory_size.max(1);
    let frac = k as f64 / n as f64;
    // Log-spaced centers between 400 Hz and 3.5 kHz.
    let center_hz = 400.0 * (3500.0f64 / 400.0).powf(frac);
    PhonemeUnit {
        voiced: k < n.div_ceil(2),
        center_hz,
        bw_hz: if k < n.div_ceil(2) { 160.0 } else { 320.0 },
    }
}

struct Resonator {
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq_hz: f64, bw_hz: f64, fs: f64) -> Self {
        let r = (-std::f64::consts::PI * bw_hz / fs).exp();
        let theta = std::f64::consts::TAU * freq_hz / fs;
        Resonator {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthesises one phoneme segment for one speaker. `sil` (index 0) is true
/// silence.
fn synth_segment(
    voice: &SpeakerVoice,
    phoneme_idx: usize,
    inventory_size: usize,
    n_samples: usize,
    fs: f64,
    rng: &mut ChaCha20Rng,
) -> Vec<f64> {
    if phoneme_idx == 0 {
        return vec![0.0; n_samples];
    }
    let unit = phoneme_unit(phoneme_idx - 1, inventory_size);
    let mut shaper = Resonator::new(unit.center_hz, unit.bw_hz, fs);
    let mut formants: Vec<Resonator> = voice
        .formants_hz
        .iter()
        .zip(&voice.formant_bw_hz)
        .map(|(&f, &bw)| Resonator::new(f, bw, fs))
        .collect();

    let mut out = Vec::with_capacity(n_samples);
    let ramp = (0.010 * fs) as usize;
    for i in 0..n_samples {
        let excitation = if unit.voiced {
            let t = i as f64 / fs;
            2.0 * (t * voice.f0_hz).fract() - 1.0
        } else {
            StandardNormal.sample(rng)
        };
        let mut y = shaper.tick(excitation);
        for f in formants.iter_mut() {
            y = f.tick(y * 0.05) + y * 0.2;
        }
        // Raised-cosine fade at the segment edges.
        let env = if i < ramp {
            0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos()
        } else if i + ramp > n_samples {
            let k = (n_samples - i) as f64 / ramp as f64;
            0.5 - 0.5 * (std::f64::consts::PI * k).cos()
        } else {
            1.0
        };
        out.push(y * env);
    }
    out
}

struct ToyUtterance {
    wave: Waveform,
    rows: Vec<AlignmentRow>,
}

fn synth_utterance(spec: &ToyCorpusSpec, speaker_idx: usize, utt_seed: u64) -> ToyUtterance {
    let fs = spec.sample_rate_hz as f64;
    let voice = speaker_voice(spec, speaker_idx);
    let mut rng = ChaCha20Rng::seed_from_u64(utt_seed);

    let (seg_lo, seg_hi) = spec.segments_per_utterance;
    let n_segments = rng.gen_range(seg_lo..=seg_hi);
    // Leading/trailing silence, occasional pauses inside.
    let mut plan: Vec<usize> = vec![0];
    for i in 0..n_segments {
        plan.push(rng.gen_range(0..spec.inventory_size) + 1);
        if i + 1 < n_segments && rng.gen_bool(0.15) {
            plan.push(0);
        }
    }
    plan.push(0);

    let mut samples = Vec::new();
    let mut rows = Vec::with_capacity(plan.len());
    let inventory = toy_inventory(spec.inventory_size);
    for &idx in &plan {
        let dur_ms = if idx == 0 {
            rng.gen_range(60.0..100.0)
        } else {
            rng.gen_range(spec.segment_duration_ms.0..=spec.segment_duration_ms.1)
        };
        let n = (dur_ms / 1000.0 * fs).round() as usize;
        let start = samples.len();
        samples.extend(synth_segment(
            &voice,
            idx,
            spec.inventory_size,
            n,
            fs,
            &mut rng,
        ));
        rows.push(AlignmentRow {
            symbol: inventory.symbols[idx].clone(),
            start_s: start as f64 / fs,
            end_s: samples.len() as f64 / fs,
        });
    }

    // Normalise to a fixed peak so downstream mixing has headroom.
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let g = 0.35 / peak;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
    ToyUtterance {
        wave: Waveform::new(samples, spec.sample_rate_hz),
        rows,
    }
}

/// Generates the clean-condition toy corpus: WAVs, alignments, inventory and
/// a manifest (written to `out_dir/manifest.jsonl` and returned). Paths in
/// the manifest are relative to `out_dir`.
pub fn make_toy_corpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| CorpusError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let inventory = toy_inventory(spec.inventory_size);
    write_inventory(&out_dir.join("inventory.txt"), &inventory)?;

    let jobs: Vec<(usize, usize)> = (0..spec.n_speakers)
        .flat_map(|s| (0..spec.utterances_per_speaker).map(move |u| (s, u)))
        .collect();

    let records: Vec<ManifestRecord> = jobs
        .par_iter()
        .map(|&(s, u)| -> Result<ManifestRecord> {
            let speaker_id = format!("spk{s:02}");
            let utt_id = format!("{speaker_id}-u{u:03}");
            let utt_seed = derive_seed(spec.seed, &utt_id);
            let utt = synth_utterance(spec, s, utt_seed);

            let wav_name = format!("{utt_id}.wav");
            let align_name = format!("{utt_id}.tsv");
            write_wav(&out_dir.join(&wav_name), &utt.wave, WavFormat::Pcm16)?;
            write_alignment(&out_dir.join(&align_name), &utt.rows)?;
            Ok(ManifestRecord {
                id: utt_id,
                speaker_id,
                condition: Condition::Clean,
                audio_path: wav_name,
                alignment_path: align_name,
                snr_db: None,
                t60_s: None,
                seed: Some(utt_seed),
                error: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = CorpusManifest {
        records,
        toy_spec_hash: Some(toy_spec_hash(spec)),
    };
    write_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_spectrogram, MelConfig, StftConfig};

    fn small_spec() -> ToyCorpusSpec {
        ToyCorpusSpec {
            n_speakers: 4,
            utterances_per_speaker: 20,
            seed: 7,
            ..ToyCorpusSpec::default()
        }
    }

    #[test]
    fn cardinality_matches_the_spec() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_toy_corpus(&small_spec(), dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 80);
        let wavs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "wav")
            })
            .count();
        assert_eq!(wavs, 80);
        assert!(dir.path().join("inventory.txt").exists());
        assert!(dir.path().join("manifest.jsonl").exists());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = ToyCorpusSpec {
            n_speakers: 2,
            utterances_per_speaker: 3,
            seed: 11,
            ..ToyCorpusSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_toy_corpus(&spec, a.path()).unwrap();
        make_toy_corpus(&spec, b.path()).unwrap();

        let mut names: Vec<String> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(names.len() > 6);
        for name in names {
            let x = fs::read(a.path().join(&name)).unwrap();
            let y = fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "file {name} differs");
        }
    }

    #[test]
    fn speakers_are_spectrally_separated() {
        let spec = small_spec();
        // Same phoneme plan and segment durations for both speakers: bypass
        // the per-utterance planner and synthesise directly.
        let fs = spec.sample_rate_hz as f64;
        let plan = [2usize, 5, 1, 7, 3];
        let mut waves = Vec::new();
        for speaker in 0..2 {
            let voice = speaker_voice(&spec, speaker);
            let mut rng = ChaCha20Rng::seed_from_u64(123);
            let mut samples = Vec::new();
            for &p in &plan {
                samples.extend(synth_segment(&voice, p, spec.inventory_size, 2400, fs, &mut rng));
            }
            let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            let g = 0.35 / peak;
            waves.push(Waveform::new(
                samples.iter().map(|s| s * g).collect(),
                spec.sample_rate_hz,
            ));
        }
        let stft_cfg = StftConfig::default();
        let mel_cfg = MelConfig::default();
        let a = mel_spectrogram(&waves[0], &stft_cfg, &mel_cfg).unwrap();
        let b = mel_spectrogram(&waves[1], &stft_cfg, &mel_cfg).unwrap();
        assert_eq!(a.n_frames, b.n_frames);
        let mut mean_l2 = 0.0;
        for t in 0..a.n_frames {
            let d: f64 = a
                .frame(t)
                .iter()
                .zip(b.frame(t))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            mean_l2 += d.sqrt();
        }
        mean_l2 /= a.n_frames as f64;
        assert!(mean_l2 > 0.1, "mean per-frame L2 {mean_l2}");
    }

    #[test]
    fn alignments_are_contiguous_and_span_preserving() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec {
            n_speakers: 2,
            utterances_per_speaker: 4,
            seed: 3,
            ..ToyCorpusSpec::default()
        };
        let manifest = make_toy_corpus(&spec, dir.path()).unwrap();
        for record in &manifest.records {
            let rows = super::super::load_alignment_rows(&dir.path().join(&record.alignment_path))
                .unwrap();
            let span = rows.last().unwrap().end_s - rows[0].start_s;
            let total: f64 = rows.iter().map(|r| r.end_s - r.start_s).sum();
            assert!((span - total).abs() < 1e-9, "gap in {}", record.id);
            for w in rows.windows(2) {
                assert_eq!(w[0].end_s, w[1].start_s);
            }
        }
    }

    #[test]
    fn manifest_carries_the_spec_hash() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec {
            n_speakers: 1,
            utterances_per_speaker: 1,
            seed: 5,
            ..ToyCorpusSpec::default()
        };
        let manifest = make_toy_corpus(&spec, dir.path()).unwrap();
        assert_eq!(manifest.toy_spec_hash, Some(toy_spec_hash(&spec)));
        let loaded = super::super::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.toy_spec_hash, Some(toy_spec_hash(&spec)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ToyCorpusSpec::default();
        spec.n_speakers = 0;
        assert!(make_toy_corpus(&spec, Path::new("/nonexistent")).is_err());
        let mut spec = ToyCorpusSpec::default();
        spec.segments_per_utterance = (5, 3);
        assert!(spec.validate().is_err());
    }
}
