//! WAV file reading and writing (16-bit PCM and 32-bit float, mono).

use std::path::Path;

use super::Waveform;
use crate::error::{AvsepError, Result};

/// Read a WAV file into a mono waveform. Multi-channel files are downmixed
/// by averaging; 16-bit integer and 32-bit float sample formats accepted.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| AvsepError::Wav {
        path: path.into(),
        message: e.to_string(),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AvsepError::Wav {
            path: path.into(),
            message: "zero channels".into(),
        });
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| AvsepError::Wav {
                path: path.into(),
                message: e.to_string(),
            })?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| AvsepError::Wav {
                path: path.into(),
                message: e.to_string(),
            })?,
        (fmt, bits) => {
            return Err(AvsepError::Wav {
                path: path.into(),
                message: format!("unsupported sample format {fmt:?}/{bits}-bit"),
            })
        }
    };

    let frames = interleaved.len() / channels;
    let mono: Vec<f64> = (0..frames)
        .map(|f| interleaved[f * channels..(f + 1) * channels].iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Write a mono 16-bit PCM WAV. Samples are clamped to [-1, 1].
pub fn write_wav_i16(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| AvsepError::Wav {
        path: path.into(),
        message: e.to_string(),
    })?;
    for &s in w.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| AvsepError::Wav {
            path: path.into(),
            message: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| AvsepError::Wav {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Write a mono 32-bit float WAV.
pub fn write_wav_f32(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| AvsepError::Wav {
        path: path.into(),
        message: e.to_string(),
    })?;
    for &s in w.samples() {
        writer.write_sample(s as f32).map_err(|e| AvsepError::Wav {
            path: path.into(),
            message: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| AvsepError::Wav {
        path: path.into(),
        message: e.to_string(),
    })
}
