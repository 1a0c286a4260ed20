//! Acoustic scene synthesis: shoebox image-source RIRs, convolution,
//! SNR-controlled mixing, and construction of degraded training corpora.

mod dataset;
mod mix;
mod rir;

pub use dataset::{
    build_dataset, sample_placement, sample_room_for_t60, sample_snr_split, sample_t60,
    SamplerConfig, SnrDraw,
};
pub use mix::{babble_noise, estimate_snr, mix_at_snr, white_noise, NoiseMixResult};
pub use rir::{
    apply_rir, estimate_t60, sabine_t60, schroeder_decay_db, simulate_rir, Rir, ShoeboxRoom,
    SPEED_OF_SOUND_M_S,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, Waveform};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("position {pos:?} is not strictly inside room dims {dims:?}")]
    OutsideRoom { pos: [f64; 3], dims: [f64; 3] },

    #[error("source and microphone coincide (zero distance)")]
    ZeroDistance,

    #[error("invalid room: {0}")]
    InvalidRoom(String),

    #[error("sample rate mismatch: {a} Hz vs {b} Hz")]
    SampleRateMismatch { a: u32, b: u32 },

    #[error("zero power in {0}")]
    ZeroPower(&'static str),

    #[error("infinite SNR: degraded signal equals the clean reference")]
    InfiniteSnr,

    #[error("length mismatch: {a} vs {b} samples")]
    LengthMismatch { a: usize, b: usize },

    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Where the three sources and the microphone sit inside the room. The
/// white-noise channel is injected at the microphone, so its nominal
/// position is carried for provenance only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePlacement {
    pub speech_pos: [f64; 3],
    pub white_noise_pos: [f64; 3],
    pub external_noise_pos: [f64; 3],
    pub mic_pos: [f64; 3],
}

impl ScenePlacement {
    pub fn validate(&self, room: &ShoeboxRoom) -> Result<()> {
        for pos in [
            self.speech_pos,
            self.white_noise_pos,
            self.external_noise_pos,
            self.mic_pos,
        ] {
            room.check_inside(pos)?;
        }
        if self.speech_pos == self.mic_pos {
            return Err(SceneError::ZeroDistance);
        }
        Ok(())
    }
}

/// Renders the degraded microphone signal for one scene: speech and external
/// noise arrive through their source-to-mic RIRs, seeded white noise is added
/// at the microphone, and both noise channels are scaled against the
/// reverberant speech to hit the requested SNRs. The result is trimmed to the
/// reverberant-speech length.
#[allow(clippy::too_many_arguments)]
pub fn render_scene(
    room: &ShoeboxRoom,
    placement: &ScenePlacement,
    speech: &Waveform,
    external_noise: &Waveform,
    white_snr_db: f64,
    external_snr_db: f64,
    seed: u64,
) -> Result<Waveform> {
    render_scene_with_reference(
        room,
        placement,
        speech,
        external_noise,
        white_snr_db,
        external_snr_db,
        seed,
    )
    .map(|(mixed, _)| mixed)
}

/// As [`render_scene`], but also returns the reverberant speech so callers
/// can estimate the achieved SNR without re-simulating.
#[allow(clippy::too_many_arguments)]
pub(crate) fn render_scene_with_reference(
    room: &ShoeboxRoom,
    placement: &ScenePlacement,
    speech: &Waveform,
    external_noise: &Waveform,
    white_snr_db: f64,
    external_snr_db: f64,
    seed: u64,
) -> Result<(Waveform, Waveform)> {
    placement.validate(room)?;
    let fs = speech.sample_rate_hz;
    if external_noise.sample_rate_hz != fs {
        return Err(SceneError::SampleRateMismatch {
            a: fs,
            b: external_noise.sample_rate_hz,
        });
    }

    let rir_speech = simulate_rir(room, placement.speech_pos, placement.mic_pos, fs)?;
    let rir_ext = simulate_rir(room, placement.external_noise_pos, placement.mic_pos, fs)?;

    let reverberant = apply_rir(speech, &rir_speech)?;
    let ext_reverberant = apply_rir(external_noise, &rir_ext)?;
    let white = white_noise(reverberant.len(), fs, seed);

    let white_mix = mix_at_snr(&reverberant, &white, white_snr_db)?;
    let ext_mix = mix_at_snr(&reverberant, &ext_reverberant, external_snr_db)?;

    let ext_tiled = mix::tile_to_len(&ext_reverberant.samples, reverberant.len());
    let mut mixed = reverberant.samples.clone();
    for (i, m) in mixed.iter_mut().enumerate() {
        *m += white_mix.noise_scale * white.samples[i] + ext_mix.noise_scale * ext_tiled[i];
    }
    Ok((Waveform::new(mixed, fs), reverberant))
}
