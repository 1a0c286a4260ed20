//! Training data assembly: manifest rows become per-utterance groups holding
//! every degraded rendering plus the clean target, and batches are sampled
//! from aligned random crops so source and target always share frames.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::FeatureConfig;
use crate::corpus::{
    derive_seed, load_alignment_rows, load_manifest, AlignmentRow, Condition, PhonemeInventory,
};
use crate::dsp::{mel_spectrogram, read_wav_expecting, MelSpectrogram};

use super::train::{mel_stats, MelStats, UtterancePair};
use super::{ModelError, ModelState, Result, MIN_FRAMES};

/// One utterance with all of its renderings. `sources` always contains the
/// clean condition too, so denoising training still sees clean inputs.
#[derive(Debug, Clone)]
pub struct UtteranceGroup {
    pub id: String,
    pub speaker_id: String,
    pub clean_mel: MelSpectrogram,
    pub sources: Vec<(Condition, MelSpectrogram)>,
    pub alignment: Vec<AlignmentRow>,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub groups: Vec<UtteranceGroup>,
    /// Indices into `groups`.
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
    /// Training-set indices per speaker, for reference sampling.
    pub speaker_train: BTreeMap<String, Vec<usize>>,
    /// Per-band statistics of the training-set clean mels.
    pub stats: MelStats,
}

/// Loads every usable utterance of a dataset manifest. Rows that recorded a
/// rendering error are dropped; the last two utterances of each speaker are
/// held out (speakers with two or fewer keep everything in training).
pub fn load_train_data(
    manifest_path: &Path,
    features: &FeatureConfig,
    inventory: &PhonemeInventory,
) -> Result<TrainData> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut by_id: BTreeMap<String, Vec<&crate::corpus::ManifestRecord>> = BTreeMap::new();
    for record in manifest.records.iter().filter(|r| r.error.is_none()) {
        by_id.entry(record.id.clone()).or_default().push(record);
    }

    let mut groups = Vec::with_capacity(by_id.len());
    for (id, records) in &by_id {
        let clean = match records.iter().find(|r| r.condition == Condition::Clean) {
            Some(r) => r,
            None => continue,
        };
        let clean_wave =
            read_wav_expecting(&base.join(&clean.audio_path), features.sample_rate_hz)?;
        let clean_mel = mel_spectrogram(&clean_wave, &features.stft, &features.mel)?;
        if clean_mel.n_frames < MIN_FRAMES {
            return Err(ModelError::TooFewFrames {
                got: clean_mel.n_frames,
                need: MIN_FRAMES,
            });
        }

        let alignment = load_alignment_rows(&base.join(&clean.alignment_path))?;
        for row in &alignment {
            if inventory.index_of(&row.symbol).is_none() {
                return Err(ModelError::UnknownPhoneme(row.symbol.clone()));
            }
        }

        let mut sources = Vec::with_capacity(records.len());
        for condition in Condition::ALL {
            let Some(record) = records.iter().find(|r| r.condition == condition) else {
                continue;
            };
            let mel = if condition == Condition::Clean {
                clean_mel.clone()
            } else {
                let wave =
                    read_wav_expecting(&base.join(&record.audio_path), features.sample_rate_hz)?;
                mel_spectrogram(&wave, &features.stft, &features.mel)?
            };
            if mel.n_frames != clean_mel.n_frames {
                return Err(ModelError::FrameCountMismatch {
                    input: mel.n_frames,
                    target: clean_mel.n_frames,
                });
            }
            sources.push((condition, mel));
        }

        groups.push(UtteranceGroup {
            id: id.clone(),
            speaker_id: clean.speaker_id.clone(),
            clean_mel,
            sources,
            alignment,
        });
    }

    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_speaker.entry(g.speaker_id.clone()).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    let mut speaker_train = BTreeMap::new();
    for (speaker, indices) in &by_speaker {
        let n_held = if indices.len() > 2 { 2 } else { 0 };
        let split = indices.len() - n_held;
        train.extend_from_slice(&indices[..split]);
        held_out.extend_from_slice(&indices[split..]);
        speaker_train.insert(speaker.clone(), indices[..split].to_vec());
    }
    train.sort_unstable();
    held_out.sort_unstable();

    let stats = mel_stats(train.iter().map(|&i| &groups[i].clean_mel))?;
    Ok(TrainData {
        groups,
        train,
        held_out,
        speaker_train,
        stats,
    })
}

fn crop_mel(mel: &MelSpectrogram, offset: usize, len: usize) -> MelSpectrogram {
    MelSpectrogram {
        values: mel.values[offset * mel.n_mels..(offset + len) * mel.n_mels].to_vec(),
        n_frames: len,
        n_mels: mel.n_mels,
        hop_size: mel.hop_size,
        sample_rate_hz: mel.sample_rate_hz,
    }
}

/// Phoneme indices of the alignment rows overlapping a frame window. Falls
/// back to the whole utterance if the window lands between rows.
fn window_phonemes(
    state: &ModelState,
    group: &UtteranceGroup,
    offset: usize,
    len: usize,
) -> Result<Vec<usize>> {
    let hop_s = group.clean_mel.hop_size as f64 / group.clean_mel.sample_rate_hz as f64;
    let t0 = offset as f64 * hop_s;
    let t1 = (offset + len) as f64 * hop_s;
    let mut symbols = Vec::new();
    for row in &group.alignment {
        if row.end_s > t0 && row.start_s < t1 {
            symbols.push(state.symbol_to_index(&row.symbol)?);
        }
    }
    if symbols.is_empty() {
        for row in &group.alignment {
            symbols.push(state.symbol_to_index(&row.symbol)?);
        }
    }
    Ok(symbols)
}

fn crop_with_rng(
    rng: &mut ChaCha20Rng,
    mel: &MelSpectrogram,
    crop_frames: usize,
) -> (MelSpectrogram, usize, usize) {
    let len = crop_frames.min(mel.n_frames);
    let max_off = mel.n_frames - len;
    let off = if max_off == 0 {
        0
    } else {
        rng.gen_range(0..=max_off)
    };
    (crop_mel(mel, off, len), off, len)
}

/// Draws one training batch. Each slot independently picks an utterance, a
/// rendering, an aligned crop of it and its clean target, and a clean
/// reference crop from a different utterance of the same speaker. The draw
/// depends only on `(train_seed, step)`, so a resumed run replays exactly.
pub fn sample_batch(
    data: &TrainData,
    state: &ModelState,
    train_seed: u64,
    step: u64,
    batch_size: usize,
    crop_frames: usize,
) -> Result<Vec<UtterancePair>> {
    if data.train.is_empty() || batch_size == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if crop_frames < MIN_FRAMES {
        return Err(ModelError::InvalidConfig(format!(
            "crop of {crop_frames} frames is below the minimum of {MIN_FRAMES}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(train_seed, &format!("step{step}")));
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let gi = data.train[rng.gen_range(0..data.train.len())];
        let group = &data.groups[gi];
        let (condition, source_full) = &group.sources[rng.gen_range(0..group.sources.len())];

        let (source, off, len) = crop_with_rng(&mut rng, source_full, crop_frames);
        let clean = crop_mel(&group.clean_mel, off, len);
        let phonemes = window_phonemes(state, group, off, len)?;

        let candidates = &data.speaker_train[&group.speaker_id];
        let others: Vec<usize> = candidates.iter().copied().filter(|&i| i != gi).collect();
        let ref_gi = if others.is_empty() {
            gi
        } else {
            others[rng.gen_range(0..others.len())]
        };
        let (speaker_ref, _, _) = crop_with_rng(&mut rng, &data.groups[ref_gi].clean_mel, crop_frames);

        batch.push(UtterancePair {
            id: format!("{}:{:?}", group.id, condition),
            source_mel: source,
            clean_target_mel: clean,
            speaker_ref_mel: speaker_ref,
            phonemes,
        });
    }
    Ok(batch)
}

/// Full-utterance evaluation pairs over the held-out split, one per held-out
/// utterance that has the requested rendering. References come from the
/// training split so evaluation never leans on held-out identity evidence.
pub fn held_out_pairs(
    data: &TrainData,
    state: &ModelState,
    condition: Condition,
) -> Result<Vec<UtterancePair>> {
    let mut pairs = Vec::new();
    for &gi in &data.held_out {
        let group = &data.groups[gi];
        let Some((_, source)) = group.sources.iter().find(|(c, _)| *c == condition) else {
            continue;
        };
        let phonemes = group
            .alignment
            .iter()
            .map(|row| state.symbol_to_index(&row.symbol))
            .collect::<Result<Vec<usize>>>()?;
        let reference = data
            .speaker_train
            .get(&group.speaker_id)
            .and_then(|v| v.first())
            .map(|&i| data.groups[i].clean_mel.clone())
            .unwrap_or_else(|| group.clean_mel.clone());
        pairs.push(UtterancePair {
            id: format!("{}:{:?}", group.id, condition),
            source_mel: source.clone(),
            clean_target_mel: group.clean_mel.clone(),
            speaker_ref_mel: reference,
            phonemes,
        });
    }
    Ok(pairs)
}
