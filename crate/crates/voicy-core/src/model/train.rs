//! Denoising training: reconstruct the clean mel from a degraded input while
//! distilling the text route into the acoustic route and holding the content
//! code consistent through the decoder.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dsp::MelSpectrogram;
use crate::grad::{self, optimizer_step, OptimizerState, Parameters, Tape, Tensor, Var};

use super::net::{dec_graph, easr_graph, ec_graph, eph_graph, es_graph, mel_tensor};
use super::{ModelConfig, ModelError, ModelState, Result, MIN_FRAMES};

/// One training example: a degraded source, its clean target (same frame
/// count), a clean reference utterance for the speaker module, and the
/// phoneme indices covering the source window.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub id: String,
    pub source_mel: MelSpectrogram,
    pub clean_target_mel: MelSpectrogram,
    pub speaker_ref_mel: MelSpectrogram,
    pub phonemes: Vec<usize>,
}

/// Scalar losses of one step. `total` is always the exact weighted sum of
/// the three parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub phonetic: f64,
    pub content: f64,
}

/// Per-band feature statistics for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-band mean and standard deviation over every frame of `mels`, with
/// the deviation floored so normalization never divides by zero.
pub fn mel_stats<'a, I>(mels: I) -> Result<MelStats>
where
    I: IntoIterator<Item = &'a MelSpectrogram>,
{
    let mut n_mels = 0usize;
    let mut count = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    let mut sum_sq: Vec<f64> = Vec::new();
    for mel in mels {
        if n_mels == 0 {
            n_mels = mel.n_mels;
            sum = vec![0.0; n_mels];
            sum_sq = vec![0.0; n_mels];
        } else if mel.n_mels != n_mels {
            return Err(ModelError::DimensionMismatch(format!(
                "mixed band counts in stats input: {} vs {n_mels}",
                mel.n_mels
            )));
        }
        for (i, &v) in mel.values.iter().enumerate() {
            let b = i % n_mels;
            sum[b] += v;
            sum_sq[b] += v * v;
        }
        count += mel.n_frames;
    }
    if count == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    Ok(MelStats { mean, std })
}

fn validate_pair(state: &ModelState, pair: &UtterancePair) -> Result<()> {
    if pair.source_mel.n_frames != pair.clean_target_mel.n_frames {
        return Err(ModelError::FrameCountMismatch {
            input: pair.source_mel.n_frames,
            target: pair.clean_target_mel.n_frames,
        });
    }
    for mel in [&pair.source_mel, &pair.speaker_ref_mel] {
        if mel.n_frames < MIN_FRAMES {
            return Err(ModelError::TooFewFrames {
                got: mel.n_frames,
                need: MIN_FRAMES,
            });
        }
    }
    if pair.phonemes.is_empty() {
        return Err(ModelError::DimensionMismatch(format!(
            "{}: empty phoneme sequence",
            pair.id
        )));
    }
    let vocab = state.config.inventory.len();
    for &s in &pair.phonemes {
        if s >= vocab {
            return Err(ModelError::UnknownPhoneme(format!("#{s}")));
        }
    }
    Ok(())
}

/// A pair already normalized into feature space; the objective graph is a
/// pure function of these and the parameters.
struct PairTensors {
    source: Tensor,
    clean: Tensor,
    reference: Tensor,
    phonemes: Vec<usize>,
    n_frames: usize,
}

fn pair_tensors(state: &ModelState, pair: &UtterancePair) -> Result<PairTensors> {
    validate_pair(state, pair)?;
    Ok(PairTensors {
        source: mel_tensor(state, &pair.source_mel)?,
        clean: mel_tensor(state, &pair.clean_target_mel)?,
        reference: mel_tensor(state, &pair.speaker_ref_mel)?,
        phonemes: pair.phonemes.clone(),
        n_frames: pair.source_mel.n_frames,
    })
}

struct LossVars {
    total: Var,
    recon: Var,
    phonetic: Var,
    content: Var,
    phonetic_emb: Var,
    content_code: Var,
}

/// Detached distillation targets pinned to specific values, for probing the
/// objective as the function backward actually differentiates: through a
/// stop-gradient the target is a constant, so a finite-difference oracle
/// must hold it fixed too.
struct FrozenTargets {
    phonetic: Tensor,
    content: Tensor,
}

/// Builds the full training objective on one tape. The decoder always sees
/// the text route; the acoustic route only ever appears inside the
/// distillation term, chasing a stop-gradient target.
fn loss_graph(
    tape: &mut Tape,
    params: &Parameters,
    cfg: &ModelConfig,
    pt: &PairTensors,
    frozen: Option<&FrozenTargets>,
) -> grad::Result<LossVars> {
    let x_src = tape.leaf(pt.source.clone());
    let x_clean = tape.leaf(pt.clean.clone());
    let x_ref = tape.leaf(pt.reference.clone());

    let content = ec_graph(tape, params, cfg.ds_factor, x_src)?;
    let speaker = es_graph(tape, params, x_ref)?;
    // The speaker module is frozen; cutting the graph here just saves the
    // backward pass a dead branch.
    let speaker = tape.stop_grad(speaker);
    let phonetic = eph_graph(tape, params, &pt.phonemes)?;
    let acoustic = easr_graph(tape, params, x_src)?;

    let predicted = dec_graph(
        tape,
        params,
        cfg.ds_factor,
        content,
        speaker,
        phonetic,
        pt.n_frames,
    )?;

    let recon = tape.mse(predicted, x_clean)?;
    let phonetic_target = match frozen {
        None => tape.stop_grad(phonetic),
        Some(f) => tape.leaf(f.phonetic.clone()),
    };
    let distill = tape.mae(acoustic, phonetic_target)?;
    let content_target = match frozen {
        None => tape.stop_grad(content),
        Some(f) => tape.leaf(f.content.clone()),
    };
    let re_encoded = ec_graph(tape, params, cfg.ds_factor, predicted)?;
    let consistency = tape.mae(re_encoded, content_target)?;

    let weighted_ph = tape.affine(distill, cfg.beta, 0.0);
    let weighted_c = tape.affine(consistency, cfg.lambda, 0.0);
    let partial = tape.add(recon, weighted_ph)?;
    let total = tape.add(partial, weighted_c)?;
    Ok(LossVars {
        total,
        recon,
        phonetic: distill,
        content: consistency,
        phonetic_emb: phonetic,
        content_code: content,
    })
}

fn report_from(tape: &Tape, vars: &LossVars) -> LossReport {
    let scalar = |v: Var| tape.value(v).values[0];
    LossReport {
        total: scalar(vars.total),
        recon: scalar(vars.recon),
        phonetic: scalar(vars.phonetic),
        content: scalar(vars.content),
    }
}

/// Evaluates the objective on one pair without touching any parameter.
pub fn compute_loss(state: &ModelState, pair: &UtterancePair) -> Result<LossReport> {
    let pt = pair_tensors(state, pair)?;
    let mut tape = Tape::new();
    let vars = loss_graph(&mut tape, &state.params, &state.config, &pt, None)?;
    Ok(report_from(&tape, &vars))
}

/// Gradients of the objective on one pair, keyed by parameter path. Frozen
/// parameters get no entry.
pub fn loss_gradients(
    state: &ModelState,
    pair: &UtterancePair,
) -> Result<(BTreeMap<String, Tensor>, LossReport)> {
    let pt = pair_tensors(state, pair)?;
    let mut tape = Tape::new();
    let vars = loss_graph(&mut tape, &state.params, &state.config, &pt, None)?;
    let report = report_from(&tape, &vars);
    let grads = tape.backward(vars.total)?;
    Ok((grads, report))
}

/// Worst relative error between analytic and finite-difference gradients of
/// the full objective on one pair.
///
/// The two distillation targets sit behind stop-gradients, so the function
/// the backward pass differentiates treats them as constants. The check
/// evaluates them once at the unperturbed parameters and pins them there;
/// otherwise the finite differences would pick up derivative mass through
/// the targets that the analytic gradient deliberately drops.
pub fn loss_gradient_check(
    state: &ModelState,
    pair: &UtterancePair,
    eps: f64,
) -> Result<grad::CheckReport> {
    let pt = pair_tensors(state, pair)?;
    let cfg = state.config.clone();
    let frozen = {
        let mut tape = Tape::new();
        let vars = loss_graph(&mut tape, &state.params, &cfg, &pt, None)?;
        FrozenTargets {
            phonetic: tape.value(vars.phonetic_emb).clone(),
            content: tape.value(vars.content_code).clone(),
        }
    };
    Ok(grad::gradient_check_report(&state.params, eps, |p, tape| {
        Ok(loss_graph(tape, p, &cfg, &pt, Some(&frozen))?.total)
    })?)
}

/// One optimizer step over a batch: per-pair gradients in parallel, averaged
/// in batch order, applied once. Returns the mean loss of the batch.
pub fn train_step(
    state: &mut ModelState,
    optimizer: &mut OptimizerState,
    batch: &[UtterancePair],
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let per_pair: Vec<(BTreeMap<String, Tensor>, LossReport)> = batch
        .par_iter()
        .map(|pair| loss_gradients(state, pair))
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut mean_grads = per_pair[0].0.clone();
    for (grads, _) in &per_pair[1..] {
        for (path, acc) in mean_grads.iter_mut() {
            let g = grads.get(path).ok_or_else(|| {
                ModelError::DimensionMismatch(format!("gradient for {path} missing in batch"))
            })?;
            for (a, b) in acc.values.iter_mut().zip(&g.values) {
                *a += b;
            }
        }
    }
    for acc in mean_grads.values_mut() {
        for v in acc.values.iter_mut() {
            *v *= scale;
        }
    }

    let mut report = LossReport {
        total: 0.0,
        recon: 0.0,
        phonetic: 0.0,
        content: 0.0,
    };
    for (_, r) in &per_pair {
        report.total += r.total * scale;
        report.recon += r.recon * scale;
        report.phonetic += r.phonetic * scale;
        report.content += r.content * scale;
    }
    if !report.total.is_finite() {
        return Err(ModelError::Diverged);
    }

    optimizer_step(&mut state.params, &mean_grads, optimizer)?;
    state.trained_steps = optimizer.step;
    Ok(report)
}
