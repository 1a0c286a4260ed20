use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{DspError, Result, Waveform};

/// Output encodings supported by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Pcm24,
    Float32,
}

const I16_SCALE: f64 = 32_768.0;
const I24_SCALE: f64 = 8_388_608.0;

/// Reads a mono WAV file. Accepts 16/24-bit integer and 32-bit float
/// encodings; anything else (including multichannel files) is rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let display = path.display().to_string();
    let mut reader = WavReader::open(path).map_err(|source| DspError::Wav {
        path: display.clone(),
        source,
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::UnsupportedWav {
            path: display,
            detail: format!("{} channels, only mono is supported", spec.channels),
        });
    }

    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / I16_SCALE))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Int, 24) => reader
            .samples::<i32>()
            .map(|s| s.map(|v| v as f64 / I24_SCALE))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        (format, bits) => {
            return Err(DspError::UnsupportedWav {
                path: display,
                detail: format!("{bits}-bit {format:?} samples"),
            })
        }
    }
    .map_err(|source| DspError::Wav {
        path: display,
        source,
    })?;

    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Reads a mono WAV file and rejects it unless its sample rate matches
/// `expected_rate_hz`. No resampling is performed.
pub fn read_wav_expecting(path: &Path, expected_rate_hz: u32) -> Result<Waveform> {
    let wave = read_wav(path)?;
    if wave.sample_rate_hz != expected_rate_hz {
        return Err(DspError::SampleRateMismatch {
            path: path.display().to_string(),
            actual: wave.sample_rate_hz,
            expected: expected_rate_hz,
        });
    }
    Ok(wave)
}

/// Writes a mono WAV file. Samples are clamped to `[-1, 1]` before integer
/// quantisation; float output is written as-is.
pub fn write_wav(path: &Path, wave: &Waveform, format: WavFormat) -> Result<()> {
    let display = path.display().to_string();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Pcm24 => 24,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Float32 => SampleFormat::Float,
            _ => SampleFormat::Int,
        },
    };
    let wrap = |source| DspError::Wav {
        path: display.clone(),
        source,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &wave.samples {
        match format {
            WavFormat::Pcm16 => {
                let v = (s.clamp(-1.0, 1.0) * I16_SCALE).round();
                writer
                    .write_sample(v.clamp(i16::MIN as f64, i16::MAX as f64) as i16)
                    .map_err(wrap)?;
            }
            WavFormat::Pcm24 => {
                let v = (s.clamp(-1.0, 1.0) * I24_SCALE).round();
                writer
                    .write_sample(v.clamp(-I24_SCALE, I24_SCALE - 1.0) as i32)
                    .map_err(wrap)?;
            }
            WavFormat::Float32 => {
                writer.write_sample(s as f32).map_err(wrap)?;
            }
        }
    }
    writer.finalize().map_err(wrap)
}
