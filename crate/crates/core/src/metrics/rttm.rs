use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mixture::SegmentLabel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub speaker: String,
    pub start: f64,
    pub end: f64,
}

/// Speaker-attributed time intervals of one recording.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiarAnnotation {
    pub tracks: Vec<Track>,
}

impl DiarAnnotation {
    pub fn new(tracks: Vec<Track>) -> Result<Self> {
        for t in &tracks {
            if t.speaker.is_empty() {
                return Err(Error::Config("empty speaker name".into()));
            }
            if !(t.end > t.start) || !t.start.is_finite() || !t.end.is_finite() {
                return Err(Error::Config(format!(
                    "track of {} must satisfy end > start, got [{}, {}]",
                    t.speaker, t.start, t.end
                )));
            }
        }
        Ok(Self { tracks })
    }

    pub fn from_labels(labels: &[SegmentLabel]) -> Self {
        Self {
            tracks: labels
                .iter()
                .map(|l| Track {
                    speaker: l.speaker_id.clone(),
                    start: l.start_s,
                    end: l.end_s,
                })
                .collect(),
        }
    }

    pub fn speakers(&self) -> Vec<String> {
        self.tracks
            .iter()
            .map(|t| t.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Same tracks in the same order, times equal within `tol` seconds.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.tracks.len() == other.tracks.len()
            && self.tracks.iter().zip(&other.tracks).all(|(a, b)| {
                a.speaker == b.speaker
                    && (a.start - b.start).abs() <= tol
                    && (a.end - b.end).abs() <= tol
            })
    }

    pub fn renamed(&self, rename: impl Fn(&str) -> String) -> Self {
        Self {
            tracks: self
                .tracks
                .iter()
                .map(|t| Track {
                    speaker: rename(&t.speaker),
                    ..t.clone()
                })
                .collect(),
        }
    }
}

/// `SPEAKER <file> 1 <tbeg> <tdur> <NA> <NA> <spk> <NA> <NA>`, millisecond precision.
pub fn render_rttm(file_id: &str, ann: &DiarAnnotation) -> String {
    let mut out = String::new();
    for t in &ann.tracks {
        let _ = writeln!(
            out,
            "SPEAKER {file_id} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            t.start,
            t.end - t.start,
            t.speaker
        );
    }
    out
}

pub fn write_rttm(path: &Path, file_id: &str, ann: &DiarAnnotation) -> Result<()> {
    fs::write(path, render_rttm(file_id, ann))?;
    Ok(())
}

/// Parses SPEAKER lines; other record types, blank lines and `#` comments are skipped.
/// Returns the file id of the first SPEAKER line (empty if none).
pub fn parse_rttm(text: &str) -> Result<(String, DiarAnnotation)> {
    let mut file_id = String::new();
    let mut tracks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            continue;
        }
        let err = |reason: String| Error::Parse {
            line: line_no,
            reason,
        };
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, found {}", fields.len())));
        }
        let num = |idx: usize, name: &str| -> Result<f64> {
            fields[idx]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("{name} {:?} is not a number", fields[idx])))
        };
        let start = num(3, "onset")?;
        let dur = num(4, "duration")?;
        if start < 0.0 {
            return Err(err(format!("negative onset {start}")));
        }
        if dur <= 0.0 {
            return Err(err(format!("non-positive duration {dur}")));
        }
        if file_id.is_empty() {
            file_id = fields[1].to_string();
        }
        tracks.push(Track {
            speaker: fields[7].to_string(),
            start,
            end: start + dur,
        });
    }
    Ok((file_id, DiarAnnotation { tracks }))
}

pub fn read_rttm(path: &Path) -> Result<(String, DiarAnnotation)> {
    parse_rttm(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_negative_duration_with_line_number() {
        let text = "SPEAKER f 1 0.000 1.000 <NA> <NA> a <NA> <NA>\nSPEAKER f 1 2.000 -0.5 <NA> <NA> b <NA> <NA>\n";
        match parse_rttm(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_rttm("SPEAKER f 1 x 1.0 <NA> <NA> a"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_rttm("SPEAKER f 1"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn skips_other_record_types() {
        let text = "# comment\nSPKR-INFO f 1 <NA> <NA> <NA> unknown a <NA> <NA>\n\nSPEAKER f 1 1.5 2 <NA> <NA> a <NA> <NA>\n";
        let (id, ann) = parse_rttm(text).unwrap();
        assert_eq!(id, "f");
        assert_eq!(ann.tracks, vec![Track { speaker: "a".into(), start: 1.5, end: 3.5 }]);
    }

    proptest! {
        #[test]
        fn write_then_read_round_trips(
            raw in prop::collection::vec((0u32..3, 0u32..100_000, 1u32..20_000), 0..20)
        ) {
            let ann = DiarAnnotation::new(raw
                .iter()
                .map(|&(s, a, d)| Track {
                    speaker: format!("spk{s}"),
                    start: a as f64 / 1000.0,
                    end: a as f64 / 1000.0 + d as f64 / 1000.0,
                })
                .collect()).unwrap();
            let (id, back) = parse_rttm(&render_rttm("rec", &ann)).unwrap();
            if !ann.is_empty() {
                prop_assert_eq!(id, "rec");
            }
            prop_assert!(back.approx_eq(&ann, 1e-9));
        }
    }
}
