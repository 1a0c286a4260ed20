//! Graph builders for the five modules, plus the eager public entry points.
//! Everything on the tape works in per-band normalized feature space; the
//! raw log-mel boundary is crossed only here, in `mel_tensor` on the way in
//! and `mel_from_rows` on the way out.
//!
//! Builders take bare `Parameters` so the gradient checker can rebuild the
//! same graph from perturbed copies.

use crate::corpus::PhonemeSequence;
use crate::dsp::{griffin_lim, mel_spectrogram, MelSpectrogram, Waveform};
use crate::grad::{self, conv1d, linear, run_bidirectional, run_gru, Parameters, RecurrentCell,
    Tape, Tensor, Var};

use super::{
    AsrEmbedding, ContentCode, Linguistic, ModelError, ModelState, PhoneticEmbedding, Result,
    SpeakerEmbedding, MIN_FRAMES,
};

/// Converted output: always a mel, optionally vocoded audio.
#[derive(Debug, Clone)]
pub struct Conversion {
    pub mel: MelSpectrogram,
    pub audio: Option<Waveform>,
}

pub(crate) fn mel_tensor(state: &ModelState, mel: &MelSpectrogram) -> Result<Tensor> {
    let n_mels = state.config.n_mels();
    if mel.n_mels != n_mels {
        return Err(ModelError::DimensionMismatch(format!(
            "mel has {} bands, model expects {n_mels}",
            mel.n_mels
        )));
    }
    if mel.sample_rate_hz != state.config.features.sample_rate_hz {
        return Err(ModelError::SampleRateMismatch {
            actual: mel.sample_rate_hz,
            expected: state.config.features.sample_rate_hz,
        });
    }
    let (mean, std) = state.normalization();
    let values = mel
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = i % n_mels;
            (v - mean[b]) / std[b]
        })
        .collect();
    Ok(Tensor::new(vec![mel.n_frames, n_mels], values)?)
}

/// Rebuilds a raw-scale mel from normalized decoder rows.
pub(crate) fn mel_from_rows(state: &ModelState, rows: &Tensor) -> MelSpectrogram {
    let n_mels = state.config.n_mels();
    let (mean, std) = state.normalization();
    let values = rows
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = i % n_mels;
            v * std[b] + mean[b]
        })
        .collect();
    MelSpectrogram {
        values,
        n_frames: rows.rows(),
        n_mels,
        hop_size: state.config.features.stft.hop_size,
        sample_rate_hz: state.config.features.sample_rate_hz,
    }
}

/// Speaker module: GRU over frames, mean pool, projection, unit norm.
pub(crate) fn es_graph(tape: &mut Tape, p: &Parameters, x: Var) -> grad::Result<Var> {
    let h = run_gru(tape, p, "es.rnn", x)?;
    let pooled = tape.mean_rows(h);
    let proj = linear(tape, p, "es.proj", pooled)?;
    Ok(tape.l2_normalize_rows(proj))
}

/// Content module: conv front end, bidirectional GRU, temporal bottleneck.
pub(crate) fn ec_graph(
    tape: &mut Tape,
    p: &Parameters,
    ds_factor: usize,
    x: Var,
) -> grad::Result<Var> {
    let c = conv1d(tape, p, "ec.conv", x)?;
    let c = tape.tanh(c);
    let h = run_bidirectional(tape, p, "ec.rnn", RecurrentCell::Gru, c)?;
    let down = tape.downsample_rows(h, ds_factor)?;
    linear(tape, p, "ec.proj", down)
}

/// Text module: embedded phoneme sequence, GRU, final state.
pub(crate) fn eph_graph(tape: &mut Tape, p: &Parameters, symbols: &[usize]) -> grad::Result<Var> {
    let table = p.var(tape, "eph.emb")?;
    let emb = tape.embedding(table, symbols)?;
    let h = run_gru(tape, p, "eph.rnn", emb)?;
    let rows = tape.value(h).rows();
    let last = tape.slice_rows(h, rows - 1, rows)?;
    linear(tape, p, "eph.proj", last)
}

/// Acoustic module: conv front end, bidirectional LSTM, mean pool. Same
/// output space as the text module so one can stand in for the other.
pub(crate) fn easr_graph(tape: &mut Tape, p: &Parameters, x: Var) -> grad::Result<Var> {
    let c = conv1d(tape, p, "easr.conv", x)?;
    let c = tape.tanh(c);
    let h = run_bidirectional(tape, p, "easr.rnn", RecurrentCell::Lstm, c)?;
    let pooled = tape.mean_rows(h);
    linear(tape, p, "easr.proj", pooled)
}

/// Decoder: upsample the content track back to frame rate, broadcast the
/// two conditioning vectors across frames, then GRU + conv + projection.
pub(crate) fn dec_graph(
    tape: &mut Tape,
    p: &Parameters,
    ds_factor: usize,
    content: Var,
    speaker: Var,
    ling: Var,
    n_frames: usize,
) -> grad::Result<Var> {
    let up = tape.upsample_rows(content, ds_factor)?;
    let up = tape.slice_rows(up, 0, n_frames)?;
    let spk = tape.upsample_rows(speaker, n_frames)?;
    let lng = tape.upsample_rows(ling, n_frames)?;
    let joint = tape.concat_cols(&[up, spk, lng])?;
    let h = run_gru(tape, p, "dec.rnn", joint)?;
    let c = conv1d(tape, p, "dec.conv", h)?;
    let c = tape.tanh(c);
    linear(tape, p, "dec.proj", c)
}

fn require_frames(mel: &MelSpectrogram, need: usize) -> Result<()> {
    if mel.n_frames < need {
        return Err(ModelError::TooFewFrames {
            got: mel.n_frames,
            need,
        });
    }
    Ok(())
}

pub fn encode_speaker(state: &ModelState, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
    require_frames(mel, MIN_FRAMES)?;
    let x = mel_tensor(state, mel)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = es_graph(&mut tape, &state.params, xv)?;
    Ok(SpeakerEmbedding(tape.value(out).values.clone()))
}

pub fn encode_content(state: &ModelState, mel: &MelSpectrogram) -> Result<ContentCode> {
    require_frames(mel, state.config.ds_factor)?;
    let x = mel_tensor(state, mel)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = ec_graph(&mut tape, &state.params, state.config.ds_factor, xv)?;
    let t = tape.value(out);
    Ok(ContentCode {
        values: t.values.clone(),
        rows: t.rows(),
        cols: t.cols(),
    })
}

pub fn encode_phonetic(state: &ModelState, seq: &PhonemeSequence) -> Result<PhoneticEmbedding> {
    if seq.inventory_id != state.config.inventory_id {
        return Err(ModelError::InventoryMismatch {
            got: seq.inventory_id.clone(),
            expected: state.config.inventory_id.clone(),
        });
    }
    if seq.symbols.is_empty() {
        return Err(ModelError::DimensionMismatch("empty phoneme sequence".into()));
    }
    let vocab = state.config.inventory.len();
    for &s in &seq.symbols {
        if s >= vocab {
            return Err(ModelError::UnknownPhoneme(format!("#{s}")));
        }
    }
    let mut tape = Tape::new();
    let out = eph_graph(&mut tape, &state.params, &seq.symbols)?;
    Ok(PhoneticEmbedding(tape.value(out).values.clone()))
}

pub fn encode_asr(state: &ModelState, mel: &MelSpectrogram) -> Result<AsrEmbedding> {
    require_frames(mel, MIN_FRAMES)?;
    let x = mel_tensor(state, mel)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = easr_graph(&mut tape, &state.params, xv)?;
    Ok(AsrEmbedding(tape.value(out).values.clone()))
}

/// Renders `n_frames` of mel from a content track plus the two conditioning
/// vectors. `n_frames` must be consistent with the content length: the
/// upsampled track is truncated, never padded.
pub fn decode(
    state: &ModelState,
    content: &ContentCode,
    speaker: &SpeakerEmbedding,
    linguistic: &Linguistic,
    n_frames: usize,
) -> Result<MelSpectrogram> {
    let cfg = &state.config;
    if content.cols != cfg.d_c {
        return Err(ModelError::DimensionMismatch(format!(
            "content code has {} columns, model expects {}",
            content.cols, cfg.d_c
        )));
    }
    if speaker.0.len() != cfg.d_s {
        return Err(ModelError::DimensionMismatch(format!(
            "speaker embedding has {} entries, model expects {}",
            speaker.0.len(),
            cfg.d_s
        )));
    }
    if linguistic.values().len() != cfg.d_p {
        return Err(ModelError::DimensionMismatch(format!(
            "linguistic embedding has {} entries, model expects {}",
            linguistic.values().len(),
            cfg.d_p
        )));
    }
    let max = content.rows * cfg.ds_factor;
    let min = max.saturating_sub(cfg.ds_factor) + 1;
    if n_frames < min || n_frames > max {
        return Err(ModelError::DimensionMismatch(format!(
            "{} content rows cover {min}..={max} frames, asked for {n_frames}",
            content.rows
        )));
    }
    let mut tape = Tape::new();
    let c = tape.leaf(Tensor::new(
        vec![content.rows, content.cols],
        content.values.clone(),
    )?);
    let u = tape.leaf(Tensor::new(vec![1, cfg.d_s], speaker.0.clone())?);
    let l = tape.leaf(Tensor::new(vec![1, cfg.d_p], linguistic.values().to_vec())?);
    let out = dec_graph(&mut tape, &state.params, cfg.ds_factor, c, u, l, n_frames)?;
    Ok(mel_from_rows(state, tape.value(out)))
}

/// Voice conversion without a transcript: content and linguistic evidence
/// both come from the source audio, identity from the reference.
pub fn convert(
    state: &ModelState,
    source: &Waveform,
    reference: &Waveform,
    vocode: bool,
) -> Result<Conversion> {
    if state.trained_steps == 0 {
        return Err(ModelError::Untrained);
    }
    let cfg = &state.config.features;
    for wave in [source, reference] {
        if wave.sample_rate_hz != cfg.sample_rate_hz {
            return Err(ModelError::SampleRateMismatch {
                actual: wave.sample_rate_hz,
                expected: cfg.sample_rate_hz,
            });
        }
    }
    let source_mel = mel_spectrogram(source, &cfg.stft, &cfg.mel)?;
    let reference_mel = mel_spectrogram(reference, &cfg.stft, &cfg.mel)?;
    let content = encode_content(state, &source_mel)?;
    let speaker = encode_speaker(state, &reference_mel)?;
    let acoustic = Linguistic::Asr(encode_asr(state, &source_mel)?);
    let mel = decode(state, &content, &speaker, &acoustic, source_mel.n_frames)?;
    let audio = if vocode {
        Some(griffin_lim(
            &mel,
            &cfg.stft,
            &cfg.mel,
            state.config.griffin_lim_iters,
        )?)
    } else {
        None
    };
    Ok(Conversion { mel, audio })
}
