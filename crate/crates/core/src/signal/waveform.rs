use crate::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// A mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
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

    /// Sample index nearest to `t` seconds, clamped to `[0, len]`.
    pub fn index_at(&self, t: f64) -> usize {
        seconds_to_samples(t, self.sample_rate).min(self.samples.len())
    }

    /// Copy of the samples in `[start, end)`; indices are clamped.
    pub fn slice(&self, start: usize, end: usize) -> Waveform {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Copy of the samples between two times in seconds.
    pub fn slice_s(&self, start_s: f64, end_s: f64) -> Waveform {
        self.slice(self.index_at(start_s), self.index_at(end_s))
    }

    pub fn rms(&self) -> f64 {
        super::rms(&self.samples)
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn seconds_to_samples(t: f64, sample_rate: u32) -> usize {
    (t.max(0.0) * sample_rate as f64).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_zero_rate() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn slicing_by_time() {
        let w = Waveform::new((0..16_000).map(|i| i as f64).collect(), 16_000).unwrap();
        let s = w.slice_s(0.25, 0.5);
        assert_eq!(s.len(), 4000);
        assert_eq!(s.samples()[0], 4000.0);
        assert_eq!(w.slice_s(0.9, 2.0).len(), 1600);
    }
}
