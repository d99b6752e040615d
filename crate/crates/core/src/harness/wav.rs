//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::{Waveform, NUM_SAMPLES, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Full-scale divisor: `-32768` maps to exactly `-1.0`.
pub const PCM16_SCALE: f64 = 32768.0;

/// Reads a PCM16 mono 16 kHz file, scales by `1 / 32768` and zero-pads or
/// truncates to one second.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedWav {
        path: path.to_path_buf(),
        reason,
    };
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "expected 16-bit integer PCM, found {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(unsupported(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(unsupported(format!(
            "expected {SAMPLE_RATE} Hz, found {} Hz",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples)?.fit_to(NUM_SAMPLES))
}

/// Writes PCM16 mono 16 kHz, rounding to the nearest step and saturating at
/// full scale.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in wave.samples() {
        let v = (s * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64);
        writer.write_sample(v as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
