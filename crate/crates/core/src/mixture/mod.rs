//! Overlapped multi-speaker mixtures with ground-truth sources and labels.

mod io;
mod labels;
mod synth;
mod toy;

pub use io::{read_mixture, write_mixture, MixtureManifest, PlacementRecord, SourceRecord};
pub use labels::{compute_activity_labels, segment_decomposition, Activity};
pub use synth::{chunk, chunk_at, plan_mixture, render_plan, synthesize_mixture, MixturePlan, Placement, SynthConfig};
pub use toy::{Band, ToyCorpus, ToyCorpusConfig, ToySpeaker};

use serde::{Deserialize, Serialize};

use crate::signal::Waveform;

/// Loudness every utterance is normalised to before mixing.
pub const UTTERANCE_DBFS: f64 = -23.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub audio: Waveform,
    pub transcript: Option<Vec<String>>,
}

/// One speaker interval. Utterance-level segments carry `sub_index == 0`;
/// [`segment_decomposition`] produces the sub-segments `U_{g,b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabel {
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub segment_index: usize,
    pub sub_index: usize,
    pub overlapped: bool,
}

impl SegmentLabel {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub(crate) fn start_sample(&self, sample_rate: u32) -> usize {
        (self.start_s * sample_rate as f64).round() as usize
    }

    pub(crate) fn end_sample(&self, sample_rate: u32) -> usize {
        (self.end_s * sample_rate as f64).round() as usize
    }
}

/// Clean signal of one speaker, aligned with the mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub speaker_id: String,
    pub audio: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mix: Waveform,
    pub sources: Vec<Source>,
    /// Utterance-level segments, sorted by start time.
    pub labels: Vec<SegmentLabel>,
    /// Per-speaker words in time order, when the utterances had transcripts.
    pub transcripts: Vec<(String, Vec<String>)>,
    pub activity: Option<Activity>,
}

impl Mixture {
    pub fn num_speakers(&self) -> usize {
        self.sources.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mix.sample_rate()
    }

    pub fn speaker_ids(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.speaker_id.as_str()).collect()
    }

    pub fn speaker_index(&self, speaker_id: &str) -> Option<usize> {
        self.sources.iter().position(|s| s.speaker_id == speaker_id)
    }

    pub fn duration_s(&self) -> f64 {
        self.mix.duration_s()
    }

    /// Labels belonging to one speaker, in time order.
    pub fn speaker_labels<'a>(&'a self, speaker_id: &'a str) -> impl Iterator<Item = &'a SegmentLabel> + 'a {
        self.labels.iter().filter(move |l| l.speaker_id == speaker_id)
    }

    /// Largest per-sample deviation between the mix and the sum of sources.
    pub fn source_sum_error(&self) -> f64 {
        (0..self.mix.len())
            .map(|n| {
                let s: f64 = self.sources.iter().map(|src| src.audio.samples()[n]).sum();
                (s - self.mix.samples()[n]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Number of speakers whose utterance-level segments cover time `t`.
    pub fn active_count_at(&self, t: f64) -> usize {
        let mut ids: Vec<&str> = self
            .labels
            .iter()
            .filter(|l| l.start_s <= t && t < l.end_s)
            .map(|l| l.speaker_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Sums per-speaker sources sample by sample.
pub(crate) fn sum_sources(sources: &[Source], len: usize, sample_rate: u32) -> Waveform {
    let mut mix = vec![0.0; len];
    for src in sources {
        for (m, s) in mix.iter_mut().zip(src.audio.samples()) {
            *m += s;
        }
    }
    Waveform::new(mix, sample_rate).expect("sources are finite")
}
