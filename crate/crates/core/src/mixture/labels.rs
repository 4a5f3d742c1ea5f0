use std::collections::BTreeSet;

use ndarray::Array2;

use super::{Mixture, SegmentLabel};
use crate::signal::{db_to_amplitude, rms, StftConfig};

/// Frame-level ground-truth activity `V_gt,k(t)`, one row per source,
/// on the centered STFT frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Activity {
    pub rows: Array2<f64>,
    pub config: StftConfig,
    pub threshold_db: f64,
}

/// Energy VAD on each clean source.
///
/// Frame `t` covers the hop-length span centered on sample `t * hop`; it is
/// active when its RMS exceeds `threshold_db` relative to the RMS of the
/// source over its labelled segments. A source with no energy gives a zero row.
pub fn compute_activity_labels(m: &Mixture, cfg: &StftConfig, threshold_db: f64) -> Activity {
    let sr = m.sample_rate();
    let frames = cfg.num_frames(m.mix.len());
    let mut rows = Array2::zeros((m.num_speakers(), frames));
    for (k, src) in m.sources.iter().enumerate() {
        let x = src.audio.samples();
        let voiced: Vec<f64> = m
            .speaker_labels(&src.speaker_id)
            .flat_map(|l| {
                let a = l.start_sample(sr).min(x.len());
                let b = l.end_sample(sr).min(x.len());
                x[a..b].iter().copied()
            })
            .collect();
        let reference = if voiced.is_empty() { rms(x) } else { rms(&voiced) };
        if reference <= 0.0 {
            continue;
        }
        let threshold = reference * db_to_amplitude(threshold_db);
        let half = cfg.hop / 2;
        for t in 0..frames {
            let center = t * cfg.hop;
            let a = center.saturating_sub(half).min(x.len());
            let b = (center + cfg.hop - half).min(x.len());
            if a < b && rms(&x[a..b]) > threshold {
                rows[[k, t]] = 1.0;
            }
        }
    }
    Activity {
        rows,
        config: *cfg,
        threshold_db,
    }
}

pub(crate) fn recompute_activity(m: &Mixture, previous: &Activity) -> Activity {
    compute_activity_labels(m, &previous.config, previous.threshold_db)
}

/// Splits every utterance-level segment wherever the set of simultaneously
/// active speakers changes. Sub-segments with two or more active speakers are
/// flagged as overlapped.
pub fn segment_decomposition(m: &Mixture) -> Vec<SegmentLabel> {
    let sr = m.sample_rate();
    let spans: Vec<(&str, usize, usize)> = m
        .labels
        .iter()
        .map(|l| (l.speaker_id.as_str(), l.start_sample(sr), l.end_sample(sr)))
        .collect();
    let mut out = Vec::new();
    for seg in &m.labels {
        let (a, b) = (seg.start_sample(sr), seg.end_sample(sr));
        let mut cuts: Vec<usize> = spans
            .iter()
            .flat_map(|&(_, s, e)| [s, e])
            .filter(|&p| p > a && p < b)
            .collect();
        cuts.push(a);
        cuts.push(b);
        cuts.sort_unstable();
        cuts.dedup();
        // active speaker set on each elementary interval
        let mut pieces: Vec<(usize, usize, BTreeSet<&str>)> = Vec::new();
        for w in cuts.windows(2) {
            let (s, e) = (w[0], w[1]);
            let active: BTreeSet<&str> = spans
                .iter()
                .filter(|&&(_, ls, le)| ls <= s && e <= le)
                .map(|&(id, _, _)| id)
                .collect();
            match pieces.last_mut() {
                Some(last) if last.2 == active => last.1 = e,
                _ => pieces.push((s, e, active)),
            }
        }
        for (b_idx, (s, e, active)) in pieces.into_iter().enumerate() {
            out.push(SegmentLabel {
                speaker_id: seg.speaker_id.clone(),
                start_s: s as f64 / sr as f64,
                end_s: e as f64 / sr as f64,
                segment_index: seg.segment_index,
                sub_index: b_idx,
                overlapped: active.len() >= 2,
            });
        }
    }
    out
}
