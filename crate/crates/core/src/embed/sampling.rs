use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{mean_embed, SpeakerEmbedding, SpeakerEncoder};
use crate::mixture::{segment_decomposition, Mixture, SegmentLabel};
use crate::signal::Waveform;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyKind {
    V1,
    V2,
    V3,
    V4,
    UniformMix,
}

/// The concrete variant an embedding was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmbeddingVariant {
    V1,
    V2,
    V3,
    V4,
}

impl EmbeddingVariant {
    pub const ALL: [EmbeddingVariant; 4] = [Self::V1, Self::V2, Self::V3, Self::V4];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingStrategy {
    pub kind: StrategyKind,
    /// V4: overlapped audio added per solo sub-segment, as a fraction of its duration.
    #[serde(default = "default_fraction")]
    pub overlap_fraction: f64,
    /// V3: silence per padding site is drawn uniformly from this range.
    #[serde(default = "default_silence")]
    pub silence_ms: (f64, f64),
}

fn default_fraction() -> f64 {
    0.10
}

fn default_silence() -> (f64, f64) {
    (200.0, 1000.0)
}

impl SamplingStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            overlap_fraction: default_fraction(),
            silence_ms: default_silence(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!(
                "overlap_fraction must lie in [0, 0.5], got {}",
                self.overlap_fraction
            )));
        }
        let (lo, hi) = self.silence_ms;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("silence_ms range [{lo}, {hi}] is invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledEmbedding {
    pub embedding: SpeakerEmbedding,
    pub variant: EmbeddingVariant,
    /// Set when V2-V4 were requested but the speaker had no usable solo audio.
    pub fell_back: bool,
    /// V4 only: seconds of overlapped mixture audio mixed into the embedding.
    pub overlap_added_s: f64,
}

/// Samples the training-time embedding of `speaker` in `m`.
pub fn sample_embedding(
    m: &Mixture,
    speaker: &str,
    strategy: &SamplingStrategy,
    encoder: &dyn SpeakerEncoder,
    seed: u64,
) -> Result<SampledEmbedding> {
    strategy.validate()?;
    let k = m
        .speaker_index(speaker)
        .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))?;
    let mut rng = rng::stream(seed, &[0xe5, k as u64]);
    let variant = match strategy.kind {
        StrategyKind::V1 => EmbeddingVariant::V1,
        StrategyKind::V2 => EmbeddingVariant::V2,
        StrategyKind::V3 => EmbeddingVariant::V3,
        StrategyKind::V4 => EmbeddingVariant::V4,
        StrategyKind::UniformMix => EmbeddingVariant::ALL[rng.gen_range(0..4)],
    };
    if variant == EmbeddingVariant::V1 {
        return Ok(SampledEmbedding {
            embedding: oracle(m, k, encoder)?,
            variant,
            fell_back: false,
            overlap_added_s: 0.0,
        });
    }

    let subs: Vec<SegmentLabel> = segment_decomposition(m)
        .into_iter()
        .filter(|s| s.speaker_id == speaker)
        .collect();
    let sr = m.sample_rate();
    let mut added = 0.0;
    let mut es = Vec::new();
    for solo in subs.iter().filter(|s| !s.overlapped) {
        let (a, b) = (solo.start_sample(sr), solo.end_sample(sr));
        let audio = match variant {
            EmbeddingVariant::V3 => pad_with_silence(&m.mix.slice(a, b), strategy.silence_ms, &mut rng),
            EmbeddingVariant::V4 => {
                let (x, extra) = extend_with_overlap(m, &subs, solo, strategy.overlap_fraction);
                added += extra;
                x
            }
            _ => m.mix.slice(a, b),
        };
        match encoder.encode(&audio) {
            Ok(e) => es.push(e),
            Err(Error::NoVoicedFrames) => {}
            Err(e) => return Err(e),
        }
    }
    if es.is_empty() {
        tracing::warn!(speaker, ?variant, "no solo audio, falling back to V1");
        return Ok(SampledEmbedding {
            embedding: oracle(m, k, encoder)?,
            variant: EmbeddingVariant::V1,
            fell_back: true,
            overlap_added_s: 0.0,
        });
    }
    if variant == EmbeddingVariant::V4 {
        tracing::debug!(speaker, overlap_added_s = added, "V4 sample");
    }
    Ok(SampledEmbedding {
        embedding: mean_embed(&es)?,
        variant,
        fell_back: false,
        overlap_added_s: added,
    })
}

/// Mean over the speaker's utterance-level segments of the clean source.
fn oracle(m: &Mixture, k: usize, encoder: &dyn SpeakerEncoder) -> Result<SpeakerEmbedding> {
    let src = &m.sources[k];
    let sr = m.sample_rate();
    let mut es = Vec::new();
    for seg in m.speaker_labels(&src.speaker_id) {
        match encoder.encode(&src.audio.slice(seg.start_sample(sr), seg.end_sample(sr))) {
            Ok(e) => es.push(e),
            Err(Error::NoVoicedFrames) => {}
            Err(e) => return Err(e),
        }
    }
    if es.is_empty() {
        return Err(Error::NoVoicedFrames);
    }
    mean_embed(&es)
}

/// Leading, trailing or both (uniformly), each site getting its own duration.
fn pad_with_silence(x: &Waveform, range_ms: (f64, f64), rng: &mut impl Rng) -> Waveform {
    let sr = x.sample_rate() as f64;
    let draw = |rng: &mut dyn rand::RngCore| -> usize {
        let ms = if range_ms.1 > range_ms.0 { rng.gen_range(range_ms.0..range_ms.1) } else { range_ms.0 };
        (ms * 1e-3 * sr).round() as usize
    };
    let site = rng.gen_range(0..3);
    let lead = if site != 1 { draw(rng) } else { 0 };
    let trail = if site != 0 { draw(rng) } else { 0 };
    let mut out = vec![0.0; lead];
    out.extend_from_slice(x.samples());
    out.resize(out.len() + trail, 0.0);
    Waveform::new(out, x.sample_rate()).expect("finite")
}

/// Grows `solo` by `fraction` of its duration into the adjacent overlapped
/// sub-segment of the same segment (following preferred). If the segment has
/// none, audio from the speaker's nearest overlapped sub-segment is appended.
/// Returns the audio and the seconds of overlapped material it contains.
fn extend_with_overlap(m: &Mixture, subs: &[SegmentLabel], solo: &SegmentLabel, fraction: f64) -> (Waveform, f64) {
    let sr = m.sample_rate();
    let (a, b) = (solo.start_sample(sr), solo.end_sample(sr));
    let want = (fraction * (b - a) as f64).round() as usize;
    if want == 0 {
        return (m.mix.slice(a, b), 0.0);
    }
    let same_seg = |s: &&SegmentLabel| s.segment_index == solo.segment_index && s.overlapped;
    let next = subs.iter().filter(same_seg).find(|s| s.sub_index == solo.sub_index + 1);
    let prev = subs
        .iter()
        .filter(same_seg)
        .find(|s| solo.sub_index > 0 && s.sub_index == solo.sub_index - 1);
    if let Some(n) = next {
        let extra = want.min(n.end_sample(sr) - b);
        return (m.mix.slice(a, b + extra), extra as f64 / sr as f64);
    }
    if let Some(p) = prev {
        let extra = want.min(a - p.start_sample(sr));
        return (m.mix.slice(a - extra, b), extra as f64 / sr as f64);
    }
    let mid = 0.5 * (solo.start_s + solo.end_s);
    let nearest = subs.iter().filter(|s| s.overlapped).min_by(|x, y| {
        let dx = (0.5 * (x.start_s + x.end_s) - mid).abs();
        let dy = (0.5 * (y.start_s + y.end_s) - mid).abs();
        dx.total_cmp(&dy)
    });
    match nearest {
        Some(o) => {
            let (oa, ob) = (o.start_sample(sr), o.end_sample(sr));
            let extra = want.min(ob - oa);
            let mut x = m.mix.slice(a, b).into_samples();
            x.extend_from_slice(&m.mix.samples()[oa..oa + extra]);
            (Waveform::new(x, sr).expect("finite"), extra as f64 / sr as f64)
        }
        None => (m.mix.slice(a, b), 0.0),
    }
}
