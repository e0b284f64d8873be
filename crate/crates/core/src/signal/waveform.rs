use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FRAME_RATE: f64 = 25.0;

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn check_compatible(&self, other: &Waveform, what: &'static str) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::SampleRateMismatch(self.sample_rate, other.sample_rate));
        }
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                what,
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Waveform) -> Result<Self> {
        self.check_compatible(other, "waveform sum")?;
        Ok(Self {
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
            sample_rate: self.sample_rate,
        })
    }

    /// Copy of `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = start + len;
        if end > self.len() {
            return Err(Error::LengthMismatch {
                what: "waveform slice",
                left: end,
                right: self.len(),
            });
        }
        Self::new(self.samples[start..end].to_vec(), self.sample_rate)
    }
}

/// Frame data of a visual stream.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualFrames {
    /// Gray-scale mouth-region crops, typically 112×112.
    Images(Vec<Array2<f32>>),
    /// Precomputed per-frame features, `[frames, dim]`.
    Features(Array2<f64>),
}

/// Lip video of the target speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualStream {
    frames: VisualFrames,
    frame_rate: f64,
}

impl VisualStream {
    pub fn new(frames: VisualFrames, frame_rate: f64) -> Result<Self> {
        if !(frame_rate > 0.0) {
            return Err(Error::Visual("frame rate must be positive".into()));
        }
        let stream = Self { frames, frame_rate };
        if stream.frame_count() == 0 {
            return Err(Error::Visual("stream has no frames".into()));
        }
        Ok(stream)
    }

    pub fn frames(&self) -> &VisualFrames {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame_count(&self) -> usize {
        match &self.frames {
            VisualFrames::Images(v) => v.len(),
            VisualFrames::Features(a) => a.nrows(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.frame_count() as f64 / self.frame_rate
    }

    /// Checks the stream covers `duration_s` seconds to within one frame.
    pub fn check_duration(&self, duration_s: f64) -> Result<()> {
        let expected = duration_s * self.frame_rate;
        if (self.frame_count() as f64 - expected).abs() > 1.0 {
            return Err(Error::Visual(format!(
                "{} frames at {} fps do not match {duration_s:.3} s of audio",
                self.frame_count(),
                self.frame_rate
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_samples() {
        assert!(Waveform::new(vec![], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0, f64::INFINITY], 16_000).is_err());
    }

    #[test]
    fn add_requires_matching_rate_and_length() {
        let a = Waveform::new(vec![1.0, 2.0], 16_000).unwrap();
        let b = Waveform::new(vec![1.0, 2.0], 8_000).unwrap();
        let c = Waveform::new(vec![1.0], 16_000).unwrap();
        assert!(matches!(a.add(&b), Err(Error::SampleRateMismatch(..))));
        assert!(matches!(a.add(&c), Err(Error::LengthMismatch { .. })));
        assert_eq!(a.add(&a).unwrap().samples(), &[2.0, 4.0]);
    }

    #[test]
    fn visual_duration_tolerance() {
        let v = VisualStream::new(VisualFrames::Features(Array2::zeros((50, 4))), 25.0).unwrap();
        assert!(v.check_duration(2.0).is_ok());
        assert!(v.check_duration(2.04).is_ok());
        assert!(v.check_duration(2.2).is_err());
        assert!(VisualStream::new(VisualFrames::Features(Array2::zeros((5, 4))), 0.0).is_err());
    }
}
