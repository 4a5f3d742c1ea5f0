use std::path::Path;

use super::waveform::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::{Error, Result};

/// Reads a 16-bit PCM mono WAV at the canonical sample rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let layout_err = |reason: String| Error::WavLayout {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(layout_err(format!(
            "expected mono, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(layout_err(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != DEFAULT_SAMPLE_RATE {
        return Err(layout_err(format!(
            "expected {} Hz, found {} Hz",
            DEFAULT_SAMPLE_RATE, spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a waveform as 16-bit PCM mono; samples are clipped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in wave.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}
