//! Centered STFT with weighted overlap-add inversion.
//!
//! Frames are centered: the signal is zero-padded by `window_len / 2` on both
//! sides so frame `t` is centered on sample `t * hop`. Inversion divides by the
//! accumulated analysis-synthesis window product, which makes the round trip
//! exact wherever that product is non-zero, including the edges.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::waveform::Waveform;
use crate::{Error, Result};

/// Analysis/synthesis window family. Both sides use the same window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    SqrtHann,
    Hann,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                match self {
                    WindowKind::SqrtHann => hann.sqrt(),
                    WindowKind::Hann => hann,
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 1024,
            hop: 256,
            window: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize, window: WindowKind) -> Result<Self> {
        let cfg = Self {
            window_len,
            hop,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Checks `0 < hop <= window_len`, even length, and the constant
    /// overlap-add property of the analysis-synthesis window product.
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || !self.window_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window_len must be even and >= 2, got {}",
                self.window_len
            )));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::Config(format!(
                "hop must satisfy 0 < hop <= window_len, got hop={} window_len={}",
                self.hop, self.window_len
            )));
        }
        let w = self.window.coefficients(self.window_len);
        let mut sums = vec![0.0; self.hop];
        for (i, v) in w.iter().enumerate() {
            sums[i % self.hop] += v * v;
        }
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        if min <= 0.0 || (max - min) > 1e-9 * max {
            return Err(Error::Config(format!(
                "{:?} window of length {} is not constant-overlap-add at hop {}",
                self.window, self.window_len, self.hop
            )));
        }
        Ok(())
    }
}

/// Complex T x F spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Array2<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
    /// Length of the time-domain signal this spectrogram represents.
    pub num_samples: usize,
}

impl Spectrogram {
    pub fn zeros(frames: usize, config: StftConfig, sample_rate: u32) -> Self {
        Self {
            bins: Array2::zeros((frames, config.num_bins())),
            config,
            sample_rate,
            num_samples: frames.saturating_sub(1) * config.hop,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.config.hop as f64
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }

    pub fn with_bins(&self, bins: Array2<Complex64>) -> Self {
        Self {
            bins,
            config: self.config,
            sample_rate: self.sample_rate,
            num_samples: self.num_samples,
        }
    }
}

/// Real T x F mask with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Array2<f64>,
}

impl Mask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn filled(frames: usize, bins: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((frames, bins), value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Elementwise product of a mask and a spectrogram.
pub fn apply_mask(mask: &Mask, x: &Spectrogram) -> Result<Spectrogram> {
    if mask.values.dim() != x.bins.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectrogram {:?}",
            mask.values.dim(),
            x.bins.dim()
        )));
    }
    let mut bins = x.bins.clone();
    Zip::from(&mut bins)
        .and(&mask.values)
        .for_each(|b, &m| *b *= m);
    Ok(x.with_bins(bins))
}

/// Planned STFT processor for one configuration.
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: config.window.coefficients(config.window_len),
            forward: planner.plan_fft_forward(config.window_len),
            inverse: planner.plan_fft_inverse(config.window_len),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn forward(&self, x: &Waveform) -> Spectrogram {
        let n = self.config.window_len;
        let half = n / 2;
        let bins = self.config.num_bins();
        let frames = self.config.num_frames(x.len());
        let samples = x.samples();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let origin = (t * self.config.hop) as isize - half as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = origin + i as isize;
                let v = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex64::new(v * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for (f, c) in buf.iter().take(bins).enumerate() {
                out[[t, f]] = *c;
            }
        }
        Spectrogram {
            bins: out,
            config: self.config,
            sample_rate: x.sample_rate(),
            num_samples: x.len(),
        }
    }

    /// Per padded-sample sum of the squared window over all frames.
    fn window_sums(&self, frames: usize) -> Vec<f64> {
        let n = self.config.window_len;
        let mut sums = vec![0.0; (frames.max(1) - 1) * self.config.hop + n];
        for t in 0..frames {
            for i in 0..n {
                sums[t * self.config.hop + i] += self.window[i] * self.window[i];
            }
        }
        sums
    }

    pub fn inverse(&self, s: &Spectrogram) -> Waveform {
        let n = self.config.window_len;
        let half = n / 2;
        let bins = self.config.num_bins();
        let frames = s.num_frames();
        let sums = self.window_sums(frames);
        let mut acc = vec![0.0; sums.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            buf[0] = Complex64::new(s.bins[[t, 0]].re, 0.0);
            buf[half] = Complex64::new(s.bins[[t, half]].re, 0.0);
            for k in 1..bins - 1 {
                let c = s.bins[[t, k]];
                buf[k] = c;
                buf[n - k] = c.conj();
            }
            self.inverse.process(&mut buf);
            for i in 0..n {
                acc[t * self.config.hop + i] += buf[i].re / n as f64 * self.window[i];
            }
        }
        let samples = (0..s.num_samples)
            .map(|j| {
                let p = j + half;
                match (acc.get(p), sums.get(p)) {
                    (Some(a), Some(&w)) if w > 1e-10 => a / w,
                    _ => 0.0,
                }
            })
            .collect();
        Waveform::new(samples, s.sample_rate).expect("finite by construction")
    }

    /// Adjoint of [`Stft::inverse`] with respect to the real and imaginary
    /// parts of the bins: returns `dL/dRe + i dL/dIm` given `dL/dy`.
    pub fn inverse_adjoint(&self, grad: &[f64], frames: usize) -> Array2<Complex64> {
        let n = self.config.window_len;
        let half = n / 2;
        let bins = self.config.num_bins();
        let sums = self.window_sums(frames);
        let mut padded = vec![0.0; sums.len()];
        for (j, g) in grad.iter().enumerate() {
            let p = j + half;
            if p < sums.len() && sums[p] > 1e-10 {
                padded[p] = g / sums[p];
            }
        }
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(padded[t * self.config.hop + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[[t, k]] = if k == 0 || k == half {
                    Complex64::new(buf[k].re / n as f64, 0.0)
                } else {
                    buf[k] * (2.0 / n as f64)
                };
            }
        }
        out
    }
}

/// One-shot STFT; plans a processor for `cfg`.
pub fn stft(x: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    Ok(Stft::new(*cfg)?.forward(x))
}

/// One-shot inverse STFT using the spectrogram's own configuration.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    if s.bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("spectrogram bins"));
    }
    Ok(Stft::new(s.config)?.inverse(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> StftConfig {
        StftConfig::new(64, 16, WindowKind::SqrtHann).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000).unwrap()
    }

    #[test]
    fn rejects_non_cola_configs() {
        assert!(StftConfig::new(64, 48, WindowKind::SqrtHann).is_err());
        assert!(StftConfig::new(64, 0, WindowKind::SqrtHann).is_err());
        assert!(StftConfig::new(64, 65, WindowKind::SqrtHann).is_err());
        assert!(StftConfig::new(63, 16, WindowKind::SqrtHann).is_err());
        assert!(StftConfig::default().validate().is_ok());
        assert!(StftConfig::new(64, 32, WindowKind::SqrtHann).is_ok());
        assert!(StftConfig::new(64, 64, WindowKind::Rectangular).is_ok());
    }

    #[test]
    fn shapes_follow_centered_framing() {
        let cfg = StftConfig::default();
        let s = stft(&Waveform::zeros(16_000, 16_000), &cfg).unwrap();
        assert_eq!(s.num_bins(), 513);
        assert_eq!(s.num_frames(), 1 + 16_000 / 256);
        // shorter than one window still yields a frame
        let s = stft(&Waveform::zeros(10, 16_000), &cfg).unwrap();
        assert_eq!(s.num_frames(), 1);
    }

    #[test]
    fn zeros_map_to_zeros() {
        let cfg = small();
        let s = stft(&Waveform::zeros(300, 16_000), &cfg).unwrap();
        assert!(s.bins.iter().all(|c| c.norm() == 0.0));
        let y = istft(&Spectrogram::zeros(20, cfg, 16_000)).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centered_sinusoid_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        let bin = 40usize;
        let freq = bin as f64 * 16_000.0 / cfg.window_len as f64;
        let x = Waveform::new(
            (0..8000)
                .map(|i| (2.0 * PI * freq * i as f64 / 16_000.0).sin())
                .collect(),
            16_000,
        )
        .unwrap();
        let s = stft(&x, &cfg).unwrap();
        // oracle: direct DFT of one interior windowed frame
        let t = 10;
        let w = cfg.window.coefficients(cfg.window_len);
        let origin = t * cfg.hop - cfg.window_len / 2;
        let direct = |k: usize| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, wi) in w.iter().enumerate() {
                let ang = -2.0 * PI * (k * i) as f64 / cfg.window_len as f64;
                acc += Complex64::from_polar(x.samples()[origin + i] * wi, ang);
            }
            acc
        };
        for k in [0, bin - 2, bin, bin + 1, 100, 300] {
            assert!((direct(k) - s.bins[[t, k]]).norm() < 1e-8);
        }
        let mags = s.magnitude();
        let row = mags.row(t);
        let peak = row[bin];
        assert_eq!(
            row.iter().cloned().fold(0.0, f64::max),
            peak,
            "maximum must be at the tone bin"
        );
        for (k, &m) in row.iter().enumerate() {
            if k.abs_diff(bin) > 1 {
                assert!(20.0 * (peak / m.max(1e-300)).log10() >= 20.0, "bin {k}");
            }
        }
    }

    #[test]
    fn round_trip_reconstructs_signal() {
        for cfg in [small(), StftConfig::default(), StftConfig::new(64, 32, WindowKind::SqrtHann).unwrap()] {
            let x = noise(5000, 3);
            let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
            assert_eq!(y.len(), x.len());
            let err = x
                .samples()
                .iter()
                .zip(y.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "max error {err}");
        }
    }

    #[test]
    fn valid_stft_images_survive_inverse_then_forward() {
        let cfg = small();
        let st = Stft::new(cfg).unwrap();
        let s = st.forward(&noise(1000, 9));
        let back = st.forward(&st.inverse(&s));
        let err = (&back.bins - &s.bins).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn single_frame_has_local_support() {
        let cfg = small();
        let mut s = Spectrogram::zeros(30, cfg, 16_000);
        s.num_samples = 29 * cfg.hop;
        let t = 12;
        for k in 0..cfg.num_bins() {
            s.bins[[t, k]] = Complex64::new(1.0, 0.5);
        }
        let y = istft(&s).unwrap();
        let center = t * cfg.hop;
        for (j, v) in y.samples().iter().enumerate() {
            if j + cfg.window_len / 2 <= center || j >= center + cfg.window_len / 2 {
                assert_eq!(*v, 0.0, "sample {j} outside the frame");
            }
        }
        assert!(y.samples().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn masks_scale_bins() {
        let cfg = small();
        let x = stft(&noise(400, 1), &cfg).unwrap();
        let (t, f) = x.bins.dim();
        let ones = apply_mask(&Mask::filled(t, f, 1.0).unwrap(), &x).unwrap();
        assert_eq!(ones, x);
        let zeros = apply_mask(&Mask::filled(t, f, 0.0).unwrap(), &x).unwrap();
        assert!(zeros.bins.iter().all(|c| c.norm() == 0.0));
        let half = apply_mask(&Mask::filled(t, f, 0.5).unwrap(), &x).unwrap();
        Zip::from(&half.bins)
            .and(&x.bins)
            .for_each(|h, o| assert_eq!(*h, *o * 0.5));
        assert!(apply_mask(&Mask::filled(t + 1, f, 1.0).unwrap(), &x).is_err());
        assert!(Mask::filled(2, 2, 1.5).is_err());
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let cfg = small();
        let st = Stft::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = 15;
        let mut s = Spectrogram::zeros(frames, cfg, 16_000);
        s.num_samples = 230;
        s.bins.mapv_inplace(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let g: Vec<f64> = (0..s.num_samples).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = st.inverse(&s);
        let lhs: f64 = y.samples().iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = st.inverse_adjoint(&g, frames);
        let rhs: f64 = Zip::from(&s.bins)
            .and(&adj)
            .fold(0.0, |acc, a, b| acc + a.re * b.re + a.im * b.im);
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
