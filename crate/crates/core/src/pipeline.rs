//! Inference: energy VAD on 30 ms frames, segment merging, concatenation of
//! voiced audio, speaker discovery by clustering, mask-based separation and
//! re-insertion of the removed silence.
//!
//! Segment arithmetic is done in integer samples so merge and discard
//! thresholds are exact.

use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::cluster::{
    embed_windows, extract_windows, overlap_filter, spectral_cluster, ClusterAssignment, ClusterReport,
    FrameClass, OverlapDetector, WINDOW_S,
};
use crate::embed::{mean_embed, SpanEncoder, SpeakerEmbedding};
use crate::metrics::{DiarAnnotation, Track};
use crate::signal::{rms, Stft, StftConfig, Waveform};
use crate::tsnet::{log_magnitude_features, separate, HeadKind, TsNetParams};
use crate::{Error, Result};

pub const VAD_FRAME_S: f64 = 0.03;
pub const DEFAULT_VAD_THRESHOLD_DB: f64 = -40.0;

/// Per-frame speech decisions over fixed 30 ms frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadFrames {
    pub decisions: Vec<bool>,
    pub frame_len: usize,
    pub total_len: usize,
    pub sample_rate: u32,
}

impl VadFrames {
    pub fn from_decisions(decisions: Vec<bool>, total_len: usize, sample_rate: u32) -> Self {
        Self {
            decisions,
            frame_len: (VAD_FRAME_S * sample_rate as f64).round() as usize,
            total_len,
            sample_rate,
        }
    }
}

/// A frame is speech when its RMS exceeds the whole signal's RMS by
/// `threshold_db` (negative values admit quieter frames).
pub fn frame_vad(x: &Waveform, threshold_db: f64) -> VadFrames {
    let sr = x.sample_rate();
    let frame = (VAD_FRAME_S * sr as f64).round() as usize;
    let level = x.rms() * 10f64.powf(threshold_db / 20.0);
    let decisions = x
        .samples()
        .chunks(frame)
        .map(|c| level > 0.0 && rms(c) > level)
        .collect();
    VadFrames::from_decisions(decisions, x.len(), sr)
}

/// `[start, end)` in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpeechSegment {
    pub start: usize,
    pub end: usize,
}

impl SpeechSegment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn start_s(&self, sample_rate: u32) -> f64 {
        self.start as f64 / sample_rate as f64
    }

    pub fn end_s(&self, sample_rate: u32) -> f64 {
        self.end as f64 / sample_rate as f64
    }

    pub fn from_seconds(start_s: f64, end_s: f64, sample_rate: u32) -> Self {
        let sr = sample_rate as f64;
        Self {
            start: (start_s * sr).round() as usize,
            end: (end_s * sr).round() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Neighbours closer than this are merged (strict inequality).
    pub merge_gap_s: f64,
    /// Merged segments shorter than this are dropped.
    pub min_duration_s: f64,
    pub padding_s: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            merge_gap_s: 0.8,
            min_duration_s: 0.5,
            padding_s: 0.01,
        }
    }
}

/// Runs of speech frames, clipped to the signal length.
pub fn vad_runs(v: &VadFrames) -> Vec<SpeechSegment> {
    let mut out = Vec::new();
    let mut start = None;
    for (l, &d) in v.decisions.iter().chain(std::iter::once(&false)).enumerate() {
        match (d, start) {
            (true, None) => start = Some(l),
            (false, Some(s)) => {
                out.push(SpeechSegment {
                    start: (s * v.frame_len).min(v.total_len),
                    end: (l * v.frame_len).min(v.total_len),
                });
                start = None;
            }
            _ => {}
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Merges neighbours whose gap is below the threshold (transitively), drops
/// short results and pads the survivors, clamped to `[0, total_len]`.
pub fn merge_segments(
    segs: &[SpeechSegment],
    cfg: &SegmentationConfig,
    sample_rate: u32,
    total_len: usize,
) -> Vec<SpeechSegment> {
    let sr = sample_rate as f64;
    let gap = (cfg.merge_gap_s * sr).round() as usize;
    let min_len = (cfg.min_duration_s * sr).round() as usize;
    let pad = (cfg.padding_s * sr).round() as usize;
    let mut sorted = segs.to_vec();
    sorted.sort();
    let mut merged: Vec<SpeechSegment> = Vec::new();
    for s in sorted {
        match merged.last_mut() {
            Some(last) if s.start < last.end + gap => last.end = last.end.max(s.end),
            _ => merged.push(s),
        }
    }
    merged
        .into_iter()
        .filter(|s| s.len() >= min_len)
        .map(|s| SpeechSegment {
            start: s.start.saturating_sub(pad),
            end: (s.end + pad).min(total_len),
        })
        .collect()
}

pub fn group_and_merge(v: &VadFrames, cfg: &SegmentationConfig) -> Vec<SpeechSegment> {
    merge_segments(&vad_runs(v), cfg, v.sample_rate, v.total_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub original_start: usize,
    pub original_end: usize,
    pub concatenated_start: usize,
}

/// Where each kept segment sits in the original and the concatenated signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilenceMap {
    pub entries: Vec<MapEntry>,
    pub sample_rate: u32,
}

impl SilenceMap {
    pub fn concatenated_len(&self) -> usize {
        self.entries
            .last()
            .map_or(0, |e| e.concatenated_start + e.original_end - e.original_start)
    }

    /// Original position of a concatenated sample index.
    pub fn to_original(&self, n: usize) -> Option<usize> {
        self.entries.iter().find_map(|e| {
            let len = e.original_end - e.original_start;
            (n >= e.concatenated_start && n < e.concatenated_start + len)
                .then(|| e.original_start + n - e.concatenated_start)
        })
    }

    /// Splits a concatenated-sample interval into original-time pieces.
    pub fn interval_to_original(&self, a: usize, b: usize) -> Vec<SpeechSegment> {
        self.entries
            .iter()
            .filter_map(|e| {
                let c0 = e.concatenated_start;
                let c1 = c0 + e.original_end - e.original_start;
                let (lo, hi) = (a.max(c0), b.min(c1));
                (lo < hi).then(|| SpeechSegment {
                    start: e.original_start + lo - c0,
                    end: e.original_start + hi - c0,
                })
            })
            .collect()
    }
}

/// Joins the segments into one stream. Segments must be sorted and disjoint
/// (touching is allowed).
pub fn concatenate_voiced(x: &Waveform, segs: &[SpeechSegment]) -> Result<(Waveform, SilenceMap)> {
    let mut out = Vec::new();
    let mut entries = Vec::new();
    let mut prev_end = 0;
    for (i, s) in segs.iter().enumerate() {
        if s.is_empty() || s.end > x.len() {
            return Err(Error::Config(format!("segment {i} [{}, {}) is empty or out of range", s.start, s.end)));
        }
        if i > 0 && s.start < prev_end {
            return Err(Error::OverlappingSegments(format!(
                "segment {i} starts at sample {} before the previous end {prev_end}",
                s.start
            )));
        }
        entries.push(MapEntry {
            original_start: s.start,
            original_end: s.end,
            concatenated_start: out.len(),
        });
        out.extend_from_slice(&x.samples()[s.start..s.end]);
        prev_end = s.end;
    }
    let map = SilenceMap {
        entries,
        sample_rate: x.sample_rate(),
    };
    Ok((Waveform::new(out, x.sample_rate())?, map))
}

/// Puts each separated stream back on the original timeline, zero elsewhere.
pub fn reinterleave(separated: &[Waveform], map: &SilenceMap, total_len: usize) -> Result<Vec<Waveform>> {
    let expected = map.concatenated_len();
    separated
        .iter()
        .map(|s| {
            if s.len() != expected {
                return Err(Error::Shape(format!("separated length {} != concatenated length {expected}", s.len())));
            }
            let mut out = vec![0.0; total_len];
            for e in &map.entries {
                let len = e.original_end - e.original_start;
                out[e.original_start..e.original_end]
                    .copy_from_slice(&s.samples()[e.concatenated_start..e.concatenated_start + len]);
            }
            Waveform::new(out, s.sample_rate())
        })
        .collect()
}

/// Detector adaptor that answers questions about the concatenated stream by
/// asking an original-time detector.
struct MappedDetector<'a> {
    inner: &'a dyn OverlapDetector,
    map: &'a SilenceMap,
}

impl OverlapDetector for MappedDetector<'_> {
    fn classify(&self, start_s: f64, end_s: f64) -> FrameClass {
        let sr = self.map.sample_rate as f64;
        let centre = (0.5 * (start_s + end_s) * sr) as usize;
        match self.map.to_original(centre) {
            Some(n) => {
                let t = n as f64 / sr;
                let half = 0.5 * (end_s - start_s);
                self.inner.classify(t - half, t + half)
            }
            None => FrameClass::NonSpeech,
        }
    }
}

/// Speaker `k` is active at frame `t` when `mean_f M_k(f, t)` exceeds
/// `threshold`. Frame `t` covers the hop centred on `t * hop` in the
/// concatenated stream; active runs are mapped back to original time and
/// smoothed with the segment merging rules.
pub fn masks_to_annotation(
    masks: &Array3<f64>,
    hop: usize,
    map: &SilenceMap,
    total_len: usize,
    names: &[String],
    threshold: f64,
    cfg: &SegmentationConfig,
) -> Result<DiarAnnotation> {
    let (k, t_len, _) = masks.dim();
    if names.len() != k {
        return Err(Error::Shape(format!("{} names for {k} speakers", names.len())));
    }
    let concat_len = map.concatenated_len();
    let sr = map.sample_rate;
    let mut tracks = Vec::new();
    for (ki, name) in names.iter().enumerate() {
        let mean: Vec<f64> = masks
            .index_axis(Axis(0), ki)
            .mean_axis(Axis(1))
            .map(|m| m.to_vec())
            .unwrap_or_default();
        let mut pieces = Vec::new();
        let mut t = 0;
        while t < t_len {
            if mean[t] > threshold {
                let s = t;
                while t < t_len && mean[t] > threshold {
                    t += 1;
                }
                let a = (s * hop).saturating_sub(hop / 2).min(concat_len);
                let b = (t * hop).saturating_sub(hop / 2).min(concat_len);
                pieces.extend(map.interval_to_original(a, b));
            } else {
                t += 1;
            }
        }
        for seg in merge_segments(&pieces, cfg, sr, total_len) {
            if seg.end > seg.start {
                tracks.push(Track {
                    speaker: name.clone(),
                    start: seg.start_s(sr),
                    end: seg.end_s(sr),
                });
            }
        }
    }
    tracks.sort_by(|a, b| a.start.total_cmp(&b.start).then_with(|| a.speaker.cmp(&b.speaker)));
    DiarAnnotation::new(tracks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub vad_threshold_db: f64,
    pub segmentation: SegmentationConfig,
    /// Known speaker count; estimated by eigengap when absent.
    pub num_speakers: Option<usize>,
    pub mask_threshold: f64,
    pub stft: StftConfig,
    pub window_s: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            vad_threshold_db: DEFAULT_VAD_THRESHOLD_DB,
            segmentation: SegmentationConfig::default(),
            num_speakers: None,
            mask_threshold: 0.5,
            stft: StftConfig::default(),
            window_s: WINDOW_S,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub segments: Vec<SegmentRecord>,
    pub voiced_s: f64,
    pub windows_total: usize,
    pub windows_kept: usize,
    pub clusters: ClusterReport,
    pub speakers: Vec<String>,
    pub timings_ms: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub sources: Vec<Waveform>,
    pub diarization: DiarAnnotation,
    pub report: PipelineReport,
}

/// Whole recording in, one waveform and one RTTM speaker per discovered
/// speaker out. The detector, when given, answers in original time.
pub fn run_pipeline(
    mix: &Waveform,
    params: &TsNetParams,
    encoder: &dyn SpanEncoder,
    detector: Option<&dyn OverlapDetector>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    if params.head_kind != HeadKind::Mask {
        return Err(Error::Config("inference needs a separation (mask-head) checkpoint".into()));
    }
    if params.dims.num_features != cfg.stft.num_bins() {
        return Err(Error::Config(format!(
            "checkpoint expects {} bins but the STFT gives {}",
            params.dims.num_features,
            cfg.stft.num_bins()
        )));
    }
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64() * 1e3));
        clock = Instant::now();
    };

    let sr = mix.sample_rate();
    let segs = group_and_merge(&frame_vad(mix, cfg.vad_threshold_db), &cfg.segmentation);
    if segs.is_empty() {
        return Err(Error::NoSpeakers);
    }
    let (stream, map) = concatenate_voiced(mix, &segs)?;
    lap("vad", &mut timings);

    let all_windows = extract_windows(&stream, cfg.window_s);
    let windows = match detector {
        Some(d) => overlap_filter(&all_windows, &MappedDetector { inner: d, map: &map }),
        None => all_windows.clone(),
    };
    let embedded = embed_windows(&stream, &windows, encoder)?;
    if embedded.is_empty() {
        return Err(Error::NoSpeakers);
    }
    let (kept, es): (Vec<_>, Vec<SpeakerEmbedding>) = embedded.into_iter().unzip();
    let assignment = if es.len() == 1 {
        ClusterAssignment {
            labels: vec![0],
            k_est: 1,
            warning: None,
        }
    } else {
        spectral_cluster(&es, cfg.num_speakers, cfg.seed)?
    };
    // largest clusters first, capped at the network's speaker limit
    let mut clusters: Vec<Vec<usize>> = (0..assignment.k_est)
        .map(|c| assignment.members(c))
        .filter(|m| !m.is_empty())
        .collect();
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    if clusters.len() > params.dims.max_speakers {
        tracing::warn!(found = clusters.len(), max = params.dims.max_speakers, "dropping smallest clusters");
        clusters.truncate(params.dims.max_speakers);
    }
    let centroids = clusters
        .iter()
        .map(|m| mean_embed(&m.iter().map(|&i| es[i].clone()).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    if centroids.is_empty() {
        return Err(Error::NoSpeakers);
    }
    lap("cluster", &mut timings);

    let stft = Stft::new(cfg.stft)?;
    let spec = stft.forward(&stream);
    let feats = log_magnitude_features(&spec);
    let (masks, y_hat) = separate(params, &stft, &feats, &centroids, &spec)?;
    let separated = y_hat
        .rows()
        .into_iter()
        .map(|r| Waveform::new(r.to_vec(), sr))
        .collect::<Result<Vec<_>>>()?;
    let sources = reinterleave(&separated, &map, mix.len())?;
    lap("separate", &mut timings);

    let names: Vec<String> = (0..centroids.len()).map(|i| format!("spk{i}")).collect();
    let diarization = masks_to_annotation(
        &masks,
        cfg.stft.hop,
        &map,
        mix.len(),
        &names,
        cfg.mask_threshold,
        &cfg.segmentation,
    )?;
    lap("diarize", &mut timings);

    let report = PipelineReport {
        segments: segs
            .iter()
            .map(|s| SegmentRecord {
                start_s: s.start_s(sr),
                end_s: s.end_s(sr),
            })
            .collect(),
        voiced_s: stream.duration_s(),
        windows_total: all_windows.len(),
        windows_kept: kept.len(),
        clusters: ClusterReport::new(&kept, &assignment, None),
        speakers: names,
        timings_ms: timings,
    };
    Ok(PipelineOutput {
        sources,
        diarization,
        report,
    })
}

/// Mean absolute change of separated magnitudes between consecutive frames,
/// taken at frames that straddle reference segment boundaries.
pub fn boundary_discontinuity(est_mags: &Array3<f64>, boundary_frames: &[usize]) -> f64 {
    let (k, t_len, f) = est_mags.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for &t in boundary_frames.iter().filter(|&&t| t + 1 < t_len) {
        for ki in 0..k {
            for fi in 0..f {
                total += (est_mags[[ki, t + 1, fi]] - est_mags[[ki, t, fi]]).abs();
            }
            count += f;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Per-speaker mask means over frequency, `K x T`.
pub fn mask_activity(masks: &Array3<f64>) -> Array2<f64> {
    masks.mean_axis(Axis(2)).unwrap_or_else(|| Array2::zeros((masks.dim().0, masks.dim().1)))
}
