use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::waveform::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav { path: path.to_path_buf(), source }
}

/// Writes mono 16-bit PCM. Samples outside [-1, 1) are clipped.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &v in w.samples() {
        let q = (v * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}

/// Reads a mono 16-bit PCM file, optionally insisting on a sample rate.
pub fn load_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::SampleRateMismatch(spec.sample_rate, rate));
        }
    }
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::InvalidWaveform(format!(
            "{}: expected mono 16-bit PCM, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|q| q as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err(path))?;
    Waveform::new(samples, spec.sample_rate)
}
