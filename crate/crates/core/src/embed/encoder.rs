use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::SpeakerEmbedding;
use crate::signal::Waveform;
use crate::{Error, Result};

/// Maps a waveform to a speaker embedding. Implementations must be
/// deterministic and safe for concurrent read-only use.
pub trait SpeakerEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, x: &Waveform) -> Result<SpeakerEmbedding>;
}

/// Embeds a time span of a recording. Every [`SpeakerEncoder`] is a span
/// encoder; [`PrecomputedEmbeddings`] answers from an external file instead.
pub trait SpanEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_span(&self, recording: &Waveform, start_s: f64, end_s: f64) -> Result<SpeakerEmbedding>;
}

impl<T: SpeakerEncoder> SpanEncoder for T {
    fn dim(&self) -> usize {
        SpeakerEncoder::dim(self)
    }

    fn encode_span(&self, recording: &Waveform, start_s: f64, end_s: f64) -> Result<SpeakerEmbedding> {
        self.encode(&recording.slice_s(start_s, end_s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub num_mels: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub min_hz: f64,
    pub max_hz: f64,
    /// Frames more than this many dB below the loudest frame are unvoiced.
    pub voiced_range_db: f64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            num_mels: 40,
            frame_len: 400,
            hop: 160,
            fft_len: 512,
            min_hz: 60.0,
            max_hz: 7800.0,
            voiced_range_db: 30.0,
        }
    }
}

/// Log-mel spectral envelope averaged over voiced frames, mean-removed
/// across bands and L2-normalised.
#[derive(Clone)]
pub struct ToyEncoder {
    config: ToyEncoderConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ToyEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyEncoder").field("config", &self.config).finish()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig, sample_rate: u32) -> Result<Self> {
        if config.num_mels == 0 || config.frame_len == 0 || config.hop == 0 {
            return Err(Error::Config("toy encoder sizes must be positive".into()));
        }
        if config.fft_len < config.frame_len {
            return Err(Error::Config("fft_len must be >= frame_len".into()));
        }
        if !(config.min_hz >= 0.0 && config.max_hz > config.min_hz && config.max_hz <= sample_rate as f64 / 2.0) {
            return Err(Error::Config("mel range must satisfy 0 <= min < max <= nyquist".into()));
        }
        let bins = config.fft_len / 2 + 1;
        let (lo, hi) = (hz_to_mel(config.min_hz), hz_to_mel(config.max_hz));
        let edges: Vec<f64> = (0..config.num_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.num_mels + 1) as f64))
            .collect();
        let filters = (0..config.num_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .filter_map(|k| {
                        let f = k as f64 * sample_rate as f64 / config.fft_len as f64;
                        let w = if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        let window = (0..config.frame_len)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / config.frame_len as f64).cos())
            .collect();
        Ok(Self {
            config,
            sample_rate,
            window,
            filters,
            fft: FftPlanner::new().plan_fft_forward(config.fft_len),
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    /// Per-frame `(total power, mel energies)`.
    fn mel_frames(&self, x: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let cfg = &self.config;
        let frames = if x.len() <= cfg.frame_len { 1 } else { 1 + (x.len() - cfg.frame_len) / cfg.hop };
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
        (0..frames)
            .map(|t| {
                buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
                for i in 0..cfg.frame_len {
                    let v = x.get(t * cfg.hop + i).copied().unwrap_or(0.0);
                    buf[i] = Complex64::new(v * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                let power: Vec<f64> = buf[..cfg.fft_len / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
                let total = power.iter().sum();
                let mel = self
                    .filters
                    .iter()
                    .map(|f| f.iter().map(|&(k, w)| w * power[k]).sum())
                    .collect();
                (total, mel)
            })
            .collect()
    }
}

impl SpeakerEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.config.num_mels
    }

    fn encode(&self, x: &Waveform) -> Result<SpeakerEmbedding> {
        if x.sample_rate() != self.sample_rate {
            return Err(Error::Config(format!(
                "encoder expects {} Hz, got {} Hz",
                self.sample_rate,
                x.sample_rate()
            )));
        }
        let frames = self.mel_frames(x.samples());
        let loudest = frames.iter().map(|f| f.0).fold(0.0, f64::max);
        if loudest <= 1e-10 {
            return Err(Error::NoVoicedFrames);
        }
        let floor = loudest * 10f64.powf(-self.config.voiced_range_db / 10.0);
        let mut acc = vec![0.0; self.config.num_mels];
        let mut count = 0usize;
        for (_, mel) in frames.iter().filter(|f| f.0 > floor) {
            for (a, m) in acc.iter_mut().zip(mel) {
                *a += (m + 1e-10).ln();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::NoVoicedFrames);
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
        let mean_band = acc.iter().sum::<f64>() / acc.len() as f64;
        SpeakerEmbedding::normalized(acc.iter().map(|a| a - mean_band).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpan {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dim: usize,
    dtype: String,
    segments: Vec<EmbeddingSpan>,
}

/// Embeddings computed outside the toolkit: a little-endian `f32` file with
/// one vector per segment, plus a JSON sidecar `{dim, dtype: "f32le", segments}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    entries: Vec<(EmbeddingSpan, SpeakerEmbedding)>,
}

impl PrecomputedEmbeddings {
    /// Reads `<stem>.f32` and `<stem>.json`. Vectors are re-normalised.
    pub fn load(stem: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        if sidecar.dtype != "f32le" {
            return Err(Error::Config(format!("unsupported embedding dtype {:?}", sidecar.dtype)));
        }
        let bytes = fs::read(stem.with_extension("f32"))?;
        let expected = sidecar.dim * sidecar.segments.len() * 4;
        if bytes.len() != expected {
            return Err(Error::Shape(format!(
                "embedding file has {} bytes, sidecar implies {expected}",
                bytes.len()
            )));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let entries = sidecar
            .segments
            .into_iter()
            .zip(floats.chunks(sidecar.dim.max(1)))
            .map(|(span, v)| Ok((span, SpeakerEmbedding::normalized(v.to_vec())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: sidecar.dim,
            entries,
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.entries.len() * self.dim * 4);
        for (_, e) in &self.entries {
            for v in e.values() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(stem.with_extension("f32"), bytes)?;
        let sidecar = Sidecar {
            dim: self.dim,
            dtype: "f32le".into(),
            segments: self.entries.iter().map(|(s, _)| s.clone()).collect(),
        };
        fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn from_entries(dim: usize, entries: Vec<(EmbeddingSpan, SpeakerEmbedding)>) -> Result<Self> {
        if entries.iter().any(|(_, e)| e.dim() != dim) {
            return Err(Error::Shape("embedding dims disagree with declared dim".into()));
        }
        Ok(Self { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl SpanEncoder for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Looks up the segment whose span matches within 1 ms.
    fn encode_span(&self, _recording: &Waveform, start_s: f64, end_s: f64) -> Result<SpeakerEmbedding> {
        self.entries
            .iter()
            .find(|(s, _)| (s.start_s - start_s).abs() < 1e-3 && (s.end_s - end_s).abs() < 1e-3)
            .map(|(_, e)| e.clone())
            .ok_or_else(|| Error::Config(format!("no precomputed embedding for span [{start_s:.3}, {end_s:.3}]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{Band, ToySpeaker};

    fn speaker(center: f64) -> ToySpeaker {
        ToySpeaker {
            id: format!("s{center}"),
            bands: vec![Band {
                center_hz: center,
                width_hz: 0.1 * center,
                gain: 1.0,
            }],
            modulation_hz: 4.0,
        }
    }

    fn encoder() -> ToyEncoder {
        ToyEncoder::new(ToyEncoderConfig::default(), 16_000).unwrap()
    }

    #[test]
    fn same_speaker_excerpts_are_similar() {
        let enc = encoder();
        let spk = speaker(900.0);
        let x = spk.utterance(4.0, 16_000, -23.0, 1);
        let a = enc.encode(&x.slice_s(0.0, 2.0)).unwrap();
        let b = enc.encode(&x.slice_s(2.0, 4.0)).unwrap();
        assert!(a.cosine(&b) > 0.9, "{}", a.cosine(&b));
        let c = enc.encode(&spk.utterance(2.0, 16_000, -23.0, 99)).unwrap();
        assert!(a.cosine(&c) > 0.9);
    }

    #[test]
    fn disjoint_band_speakers_are_dissimilar() {
        let enc = encoder();
        let a = enc.encode(&speaker(500.0).utterance(2.0, 16_000, -23.0, 1)).unwrap();
        let b = enc.encode(&speaker(3000.0).utterance(2.0, 16_000, -23.0, 2)).unwrap();
        assert!(a.cosine(&b) < 0.5, "{}", a.cosine(&b));
    }

    #[test]
    fn encoding_is_deterministic_and_rejects_silence() {
        let enc = encoder();
        let x = speaker(1200.0).utterance(1.0, 16_000, -23.0, 3);
        assert_eq!(enc.encode(&x).unwrap(), enc.encode(&x).unwrap());
        assert_eq!(enc.encode(&x).unwrap().dim(), 40);
        let err = enc.encode(&Waveform::zeros(16_000, 16_000)).unwrap_err();
        assert_eq!(err.to_string(), "no voiced frames");
    }

    #[test]
    fn precomputed_files_round_trip() {
        let enc = encoder();
        let x = speaker(700.0).utterance(3.0, 16_000, -23.0, 4);
        let spans = [(0.0, 1.0), (1.0, 2.5)];
        let entries = spans
            .iter()
            .map(|&(a, b)| {
                (
                    EmbeddingSpan { start_s: a, end_s: b },
                    enc.encode_span(&x, a, b).unwrap(),
                )
            })
            .collect();
        let pre = PrecomputedEmbeddings::from_entries(40, entries).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("emb");
        pre.save(&stem).unwrap();
        let back = PrecomputedEmbeddings::load(&stem).unwrap();
        assert_eq!(back.len(), 2);
        let direct = enc.encode_span(&x, 1.0, 2.5).unwrap();
        let looked_up = back.encode_span(&x, 1.0, 2.5).unwrap();
        assert!(direct.cosine(&looked_up) > 1.0 - 1e-6);
        assert!(back.encode_span(&x, 0.3, 0.9).is_err());
    }
}
