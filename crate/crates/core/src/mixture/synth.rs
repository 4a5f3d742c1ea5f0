use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::labels::recompute_activity;
use super::{sum_sources, Mixture, SegmentLabel, Source, Utterance, UTTERANCE_DBFS};
use crate::signal::{db_to_amplitude, Waveform};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_speakers: usize,
    /// Cap on the overlap between adjacent utterances, as a fraction of the shorter one.
    pub max_overlap: f64,
    pub min_len_s: f64,
    /// Uses this overlap fraction for every adjacency instead of sampling one.
    #[serde(default)]
    pub forced_overlap: Option<f64>,
    /// Utterance loudness before mixing; `None` keeps the pool's levels.
    #[serde(default = "default_dbfs")]
    pub normalize_dbfs: Option<f64>,
}

fn default_dbfs() -> Option<f64> {
    Some(UTTERANCE_DBFS)
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_speakers: 8,
            max_overlap: 0.8,
            min_len_s: 60.0,
            forced_overlap: None,
            normalize_dbfs: default_dbfs(),
        }
    }
}

/// Where one pool utterance lands in the mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub utterance: usize,
    pub speaker_id: String,
    pub offset: usize,
    /// Fraction of the shorter neighbour this placement overlaps its predecessor by.
    pub overlap_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePlan {
    pub sample_rate: u32,
    pub speakers: Vec<String>,
    pub placements: Vec<Placement>,
    pub normalize_dbfs: Option<f64>,
}

impl MixturePlan {
    pub fn total_len(&self, pool: &[Utterance]) -> usize {
        self.placements
            .iter()
            .map(|p| p.offset + pool[p.utterance].audio.len())
            .max()
            .unwrap_or(0)
    }
}

/// Draws a placement plan: `K` distinct speakers, adjacent utterances overlapping
/// by a uniform fraction of the shorter one, until the length reaches `min_len_s`.
pub fn plan_mixture(pool: &[Utterance], cfg: &SynthConfig, seed: u64) -> Result<MixturePlan> {
    if !(0.0..1.0).contains(&cfg.max_overlap) {
        return Err(Error::Config(format!(
            "max_overlap must lie in [0, 1), got {}",
            cfg.max_overlap
        )));
    }
    if let Some(f) = cfg.forced_overlap {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("forced_overlap must lie in [0, 1), got {f}")));
        }
    }
    if cfg.num_speakers == 0 {
        return Err(Error::Config("num_speakers must be positive".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in pool.iter().enumerate() {
        if u.audio.is_empty() {
            return Err(Error::Empty("utterance audio"));
        }
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(i);
    }
    if by_speaker.len() < cfg.num_speakers {
        return Err(Error::InsufficientPool {
            needed: cfg.num_speakers,
            available: by_speaker.len(),
        });
    }
    let sample_rate = pool[0].audio.sample_rate();
    let mut rng = rng::stream(seed, &[0x5e17]);
    let mut names: Vec<&str> = by_speaker.keys().copied().collect();
    names.shuffle(&mut rng);
    names.truncate(cfg.num_speakers);

    let min_len = (cfg.min_len_s.max(0.0) * sample_rate as f64).ceil() as usize;
    let mut first_round: Vec<&str> = names.clone();
    first_round.shuffle(&mut rng);
    let mut placements: Vec<Placement> = Vec::new();
    let mut speaker_end: BTreeMap<&str, usize> = BTreeMap::new();
    let mut end = 0usize;
    let mut prev: Option<(usize, usize, &str)> = None; // (offset, len, speaker)
    let max_steps = 100_000;
    for step in 0..max_steps {
        if step >= first_round.len() && end >= min_len {
            break;
        }
        let speaker = if step < first_round.len() {
            first_round[step]
        } else {
            let candidates: Vec<&str> = names
                .iter()
                .copied()
                .filter(|s| names.len() == 1 || Some(*s) != prev.map(|p| p.2))
                .collect();
            candidates[rng.gen_range(0..candidates.len())]
        };
        let utts = &by_speaker[speaker];
        let utterance = utts[rng.gen_range(0..utts.len())];
        let len = pool[utterance].audio.len();
        let (offset, fraction) = match prev {
            None => (0, 0.0),
            Some((p_off, p_len, p_spk)) => {
                let p_end = p_off + p_len;
                if p_spk == speaker {
                    (p_end, 0.0)
                } else {
                    let fraction = match cfg.forced_overlap {
                        Some(f) => f,
                        None if cfg.max_overlap > 0.0 => rng.gen_range(0.0..cfg.max_overlap),
                        None => 0.0,
                    };
                    let ov = (fraction * p_len.min(len) as f64).round() as usize;
                    let own_end = speaker_end.get(speaker).copied().unwrap_or(0);
                    let offset = (p_end - ov).max(own_end);
                    let realised = (p_end - offset) as f64 / p_len.min(len) as f64;
                    (offset, realised)
                }
            }
        };
        placements.push(Placement {
            utterance,
            speaker_id: speaker.to_string(),
            offset,
            overlap_fraction: fraction,
        });
        speaker_end.insert(speaker, offset + len);
        end = end.max(offset + len);
        prev = Some((offset, len, speaker));
    }
    Ok(MixturePlan {
        sample_rate,
        speakers: names.iter().map(|s| s.to_string()).collect(),
        placements,
        normalize_dbfs: cfg.normalize_dbfs,
    })
}

/// Renders a plan into sources, mix and utterance-level labels.
pub fn render_plan(pool: &[Utterance], plan: &MixturePlan) -> Result<Mixture> {
    let total = plan.total_len(pool);
    let sr = plan.sample_rate;
    let mut sources: Vec<Source> = plan
        .speakers
        .iter()
        .map(|s| Source {
            speaker_id: s.clone(),
            audio: Waveform::zeros(total, sr),
        })
        .collect();
    let mut transcripts: Vec<(String, Vec<String>)> =
        plan.speakers.iter().map(|s| (s.clone(), Vec::new())).collect();
    let mut order: Vec<&Placement> = plan.placements.iter().collect();
    order.sort_by_key(|p| p.offset);
    let mut labels = Vec::with_capacity(order.len());
    let mut seg_count: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &order {
        let utt = &pool[p.utterance];
        let k = plan
            .speakers
            .iter()
            .position(|s| *s == p.speaker_id)
            .ok_or_else(|| Error::UnknownSpeaker(p.speaker_id.clone()))?;
        let gain = match plan.normalize_dbfs {
            Some(db) if utt.audio.rms() > 0.0 => db_to_amplitude(db) / utt.audio.rms(),
            _ => 1.0,
        };
        let dst = sources[k].audio.samples_mut();
        for (i, s) in utt.audio.samples().iter().enumerate() {
            dst[p.offset + i] += s * gain;
        }
        if let Some(words) = &utt.transcript {
            transcripts[k].1.extend(words.iter().cloned());
        }
        let g = seg_count.entry(p.speaker_id.as_str()).or_insert(0);
        labels.push(SegmentLabel {
            speaker_id: p.speaker_id.clone(),
            start_s: p.offset as f64 / sr as f64,
            end_s: (p.offset + utt.audio.len()) as f64 / sr as f64,
            segment_index: *g,
            sub_index: 0,
            overlapped: false,
        });
        *g += 1;
    }
    mark_overlaps(&mut labels);
    let mix = sum_sources(&sources, total, sr);
    transcripts.retain(|(_, w)| !w.is_empty());
    Ok(Mixture {
        mix,
        sources,
        labels,
        transcripts,
        activity: None,
    })
}

/// Sets each segment's flag when another speaker's segment intersects it.
pub(crate) fn mark_overlaps(labels: &mut [SegmentLabel]) {
    let spans: Vec<(String, f64, f64)> = labels
        .iter()
        .map(|l| (l.speaker_id.clone(), l.start_s, l.end_s))
        .collect();
    for l in labels.iter_mut() {
        l.overlapped = spans
            .iter()
            .any(|(s, a, b)| *s != l.speaker_id && *a < l.end_s && l.start_s < *b);
    }
}

/// Plans and renders a mixture in one step.
pub fn synthesize_mixture(pool: &[Utterance], cfg: &SynthConfig, seed: u64) -> Result<Mixture> {
    let plan = plan_mixture(pool, cfg, seed)?;
    render_plan(pool, &plan)
}

/// A contiguous `len_s` slice at a seeded random offset.
pub fn chunk(m: &Mixture, len_s: f64, seed: u64) -> Result<Mixture> {
    let sr = m.sample_rate();
    let len = (len_s * sr as f64).round() as usize;
    if len > m.mix.len() || len == 0 {
        return Err(Error::TooShort {
            needed_s: len_s,
            actual_s: m.duration_s(),
        });
    }
    let offset = rng::stream(seed, &[0xc4u64]).gen_range(0..=m.mix.len() - len);
    chunk_at(m, offset as f64 / sr as f64, len_s)
}

/// The slice `[offset_s, offset_s + len_s)`; label times are shifted and clipped.
pub fn chunk_at(m: &Mixture, offset_s: f64, len_s: f64) -> Result<Mixture> {
    let sr = m.sample_rate();
    let start = (offset_s * sr as f64).round() as usize;
    let len = (len_s * sr as f64).round() as usize;
    if start + len > m.mix.len() || len == 0 {
        return Err(Error::TooShort {
            needed_s: offset_s + len_s,
            actual_s: m.duration_s(),
        });
    }
    let end = start + len;
    let sources: Vec<Source> = m
        .sources
        .iter()
        .map(|s| Source {
            speaker_id: s.speaker_id.clone(),
            audio: s.audio.slice(start, end),
        })
        .collect();
    let mut labels = Vec::new();
    let mut seg_count: BTreeMap<String, usize> = BTreeMap::new();
    for l in &m.labels {
        let a = l.start_sample(sr).max(start);
        let b = l.end_sample(sr).min(end);
        if a >= b {
            continue;
        }
        let g = seg_count.entry(l.speaker_id.clone()).or_insert(0);
        labels.push(SegmentLabel {
            speaker_id: l.speaker_id.clone(),
            start_s: (a - start) as f64 / sr as f64,
            end_s: (b - start) as f64 / sr as f64,
            segment_index: *g,
            sub_index: 0,
            overlapped: false,
        });
        *g += 1;
    }
    mark_overlaps(&mut labels);
    let mut out = Mixture {
        mix: m.mix.slice(start, end),
        sources,
        labels,
        // word timings are unknown, so transcripts do not survive slicing
        transcripts: Vec::new(),
        activity: None,
    };
    if let Some(act) = &m.activity {
        out.activity = Some(recompute_activity(&out, act));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{ToyCorpus, ToyCorpusConfig};

    fn tone_utt(id: &str, spk: &str, secs: f64) -> Utterance {
        let n = (secs * 16_000.0) as usize;
        Utterance {
            id: id.into(),
            speaker_id: spk.into(),
            audio: Waveform::new(
                (0..n).map(|i| (i as f64 * 0.01 + spk.len() as f64).sin() * 0.1).collect(),
                16_000,
            )
            .unwrap(),
            transcript: Some(vec![id.to_string()]),
        }
    }

    fn toy_pool() -> Vec<Utterance> {
        ToyCorpus::generate(&ToyCorpusConfig {
            num_speakers: 4,
            utterances_per_speaker: 3,
            min_utt_s: 1.0,
            max_utt_s: 2.0,
            ..Default::default()
        })
        .unwrap()
        .utterances
    }

    #[test]
    fn single_speaker_single_utterance_is_identity() {
        let pool = vec![tone_utt("u0", "a", 2.0)];
        let cfg = SynthConfig {
            num_speakers: 1,
            max_overlap: 0.0,
            min_len_s: 0.0,
            forced_overlap: None,
            normalize_dbfs: None,
        };
        let m = synthesize_mixture(&pool, &cfg, 3).unwrap();
        assert_eq!(m.mix, pool[0].audio);
        assert_eq!(m.labels.len(), 1);
        assert!(!m.labels[0].overlapped);
        assert_eq!(m.labels[0].start_s, 0.0);
        assert_eq!(m.labels[0].end_s, 2.0);
    }

    #[test]
    fn zero_overlap_gives_disjoint_segments() {
        let pool = toy_pool();
        let cfg = SynthConfig {
            num_speakers: 2,
            max_overlap: 0.0,
            min_len_s: 10.0,
            ..Default::default()
        };
        let m = synthesize_mixture(&pool, &cfg, 11).unwrap();
        assert!(m.labels.iter().all(|l| !l.overlapped));
        for w in m.labels.windows(2) {
            assert!(w[0].end_s <= w[1].start_s);
        }
        assert!(m.duration_s() >= 10.0);
    }

    #[test]
    fn forced_overlap_region_matches_interval_arithmetic() {
        let pool = vec![tone_utt("a0", "a", 10.0), tone_utt("b0", "bb", 10.0)];
        let cfg = SynthConfig {
            num_speakers: 2,
            max_overlap: 0.8,
            min_len_s: 0.0,
            forced_overlap: Some(0.8),
            normalize_dbfs: None,
        };
        let m = synthesize_mixture(&pool, &cfg, 0).unwrap();
        // oracle: first utterance [0,10], second starts at 10 - 0.8*10 = 2
        let subs = crate::mixture::segment_decomposition(&m);
        let overlapped: f64 = subs
            .iter()
            .filter(|s| s.overlapped && s.speaker_id == m.labels[0].speaker_id)
            .map(|s| s.duration_s())
            .sum();
        assert!((overlapped - 8.0).abs() <= 256.0 / 16_000.0, "{overlapped}");
        assert!((m.duration_s() - 12.0).abs() < 1e-9);
    }

    #[test]
    fn insufficient_pool_is_rejected() {
        let pool = vec![tone_utt("a0", "a", 1.0)];
        let cfg = SynthConfig {
            num_speakers: 2,
            ..Default::default()
        };
        assert!(matches!(
            synthesize_mixture(&pool, &cfg, 0),
            Err(Error::InsufficientPool { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn overlaps_respect_cap_and_seeds_are_deterministic() {
        let pool = toy_pool();
        let cfg = SynthConfig {
            num_speakers: 3,
            max_overlap: 0.8,
            min_len_s: 12.0,
            ..Default::default()
        };
        let plan = plan_mixture(&pool, &cfg, 5).unwrap();
        assert!(plan.placements.iter().all(|p| p.overlap_fraction <= 0.8 + 1e-9));
        let a = synthesize_mixture(&pool, &cfg, 5).unwrap();
        let b = synthesize_mixture(&pool, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.source_sum_error() < 1e-6);
        assert_eq!(a.num_speakers(), 3);
        let c = synthesize_mixture(&pool, &cfg, 6).unwrap();
        assert_ne!(a.mix, c.mix);
    }

    #[test]
    fn chunk_shifts_and_clips_labels() {
        let pool = vec![tone_utt("a0", "a", 30.0), tone_utt("b0", "bb", 30.0)];
        let cfg = SynthConfig {
            num_speakers: 2,
            max_overlap: 0.5,
            min_len_s: 0.0,
            forced_overlap: Some(0.0),
            normalize_dbfs: None,
        };
        let m = synthesize_mixture(&pool, &cfg, 1).unwrap();
        assert!((m.duration_s() - 60.0).abs() < 1e-9);
        let full = chunk_at(&m, 0.0, 60.0).unwrap();
        assert_eq!(full.mix, m.mix);
        assert_eq!(full.labels, m.labels);

        let c = chunk_at(&m, 10.0, 30.0).unwrap();
        assert_eq!(c.labels.len(), 2);
        assert_eq!(c.labels[0].start_s, 0.0);
        assert_eq!(c.labels[0].end_s, 20.0);
        assert_eq!(c.labels[1].start_s, 20.0);
        assert_eq!(c.labels[1].end_s, 30.0);
        assert!(c.source_sum_error() < 1e-6);

        assert!(chunk(&m, 61.0, 0).is_err());
        let r = chunk(&m, 37.0, 4).unwrap();
        assert!((r.duration_s() - 37.0).abs() < 1e-9);
        assert!(r.source_sum_error() < 1e-6);
    }
}
