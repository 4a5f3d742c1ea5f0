//! Synthetic "speakers": noise shaped by a speaker-specific spectral envelope,
//! amplitude-modulated and gated into bursts so activity labels vary.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::signal::{db_to_amplitude, Waveform, DEFAULT_SAMPLE_RATE};
use crate::{rng, Error, Result};

/// Gaussian bump of the spectral envelope, in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub center_hz: f64,
    pub width_hz: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpeaker {
    pub id: String,
    pub bands: Vec<Band>,
    pub modulation_hz: f64,
}

impl ToySpeaker {
    pub fn envelope(&self, freq_hz: f64) -> f64 {
        self.bands
            .iter()
            .map(|b| b.gain * (-0.5 * ((freq_hz - b.center_hz) / b.width_hz).powi(2)).exp())
            .sum()
    }

    /// Renders `duration_s` of this speaker, normalised to `dbfs` RMS.
    pub fn utterance(&self, duration_s: f64, sample_rate: u32, dbfs: f64, seed: u64) -> Waveform {
        let n = ((duration_s * sample_rate as f64).round() as usize).max(1);
        let mut rng = rng::stream(seed, &[0x70e]);
        let mut buf: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            let bin = k.min(n - k);
            let f = bin as f64 * sample_rate as f64 / n as f64;
            *c *= self.envelope(f);
        }
        planner.plan_fft_inverse(n).process(&mut buf);

        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let gate = burst_gate(n, sample_rate, &mut rng);
        let mut x: Vec<f64> = buf
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let t = i as f64 / sample_rate as f64;
                let am = 0.65 + 0.35 * (std::f64::consts::TAU * self.modulation_hz * t + phase).sin();
                c.re * am * gate[i]
            })
            .collect();
        let rms = crate::signal::rms(&x);
        if rms > 0.0 {
            let g = db_to_amplitude(dbfs) / rms;
            x.iter_mut().for_each(|v| *v *= g);
        }
        Waveform::new(x, sample_rate).expect("finite")
    }
}

/// Alternating speech bursts (0.4-1.2 s) and pauses (0.1-0.3 s) with 10 ms ramps.
/// The final burst always runs to the end of the utterance.
fn burst_gate(n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let ramp = (0.01 * sr) as usize;
    let min_tail = (0.3 * sr) as usize;
    let mut bursts = Vec::new();
    let mut pos = 0usize;
    loop {
        let end = (pos + (rng.gen_range(0.4..1.2) * sr) as usize).min(n);
        let pause = (rng.gen_range(0.1..0.3) * sr) as usize;
        if end + pause + min_tail >= n {
            bursts.push((pos, n));
            break;
        }
        bursts.push((pos, end));
        pos = end + pause;
    }
    let mut gate = vec![0.0; n];
    for (a, b) in bursts {
        let len = b - a;
        for i in 0..len {
            let edge = i.min(len - 1 - i);
            gate[a + i] = if edge < ramp { edge as f64 / ramp as f64 } else { 1.0 };
        }
    }
    gate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_utt_s: f64,
    pub max_utt_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 8,
            utterances_per_speaker: 6,
            min_utt_s: 2.0,
            max_utt_s: 5.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

const WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub speakers: Vec<ToySpeaker>,
    pub utterances: Vec<Utterance>,
}

impl ToyCorpus {
    /// Speakers get a primary band on an evenly spaced log-frequency grid
    /// (shuffled) plus one random secondary band.
    pub fn speakers(cfg: &ToyCorpusConfig) -> Vec<ToySpeaker> {
        let mut rng = rng::stream(cfg.seed, &[0x5b]);
        let n = cfg.num_speakers;
        let (lo, hi) = (300f64.ln(), 5500f64.ln());
        let mut slots: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), &mut rng);
        (0..n)
            .map(|i| {
                let pos = if n == 1 { 0.5 } else { slots[i] as f64 / (n - 1) as f64 };
                let primary = (lo + pos * (hi - lo)).exp();
                let secondary = (rng.gen_range(lo..hi)).exp();
                ToySpeaker {
                    id: format!("spk{i:02}"),
                    bands: vec![
                        Band {
                            center_hz: primary,
                            width_hz: 0.12 * primary + 40.0,
                            gain: 1.0,
                        },
                        Band {
                            center_hz: secondary,
                            width_hz: 0.1 * secondary + 40.0,
                            gain: rng.gen_range(0.3..0.6),
                        },
                    ],
                    modulation_hz: rng.gen_range(3.0..6.0),
                }
            })
            .collect()
    }

    pub fn generate(cfg: &ToyCorpusConfig) -> Result<Self> {
        if cfg.num_speakers == 0 || cfg.utterances_per_speaker == 0 {
            return Err(Error::Config("toy corpus needs speakers and utterances".into()));
        }
        if !(cfg.min_utt_s > 0.0 && cfg.max_utt_s >= cfg.min_utt_s) {
            return Err(Error::Config("utterance durations must satisfy 0 < min <= max".into()));
        }
        let speakers = Self::speakers(cfg);
        Ok(Self::from_speakers(speakers, cfg))
    }

    pub fn from_speakers(speakers: Vec<ToySpeaker>, cfg: &ToyCorpusConfig) -> Self {
        let mut utterances = Vec::new();
        for (si, spk) in speakers.iter().enumerate() {
            for u in 0..cfg.utterances_per_speaker {
                let mut rng = rng::stream(cfg.seed, &[0x77, si as u64, u as u64]);
                let dur = if cfg.max_utt_s > cfg.min_utt_s {
                    rng.gen_range(cfg.min_utt_s..cfg.max_utt_s)
                } else {
                    cfg.min_utt_s
                };
                let audio = spk.utterance(dur, cfg.sample_rate, super::UTTERANCE_DBFS, rng.gen());
                let words = (0..((dur * 2.0).ceil() as usize).max(1))
                    .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
                    .collect();
                utterances.push(Utterance {
                    id: format!("{}-u{u:02}", spk.id),
                    speaker_id: spk.id.clone(),
                    audio,
                    transcript: Some(words),
                });
            }
        }
        Self {
            speakers,
            utterances,
        }
    }
}
