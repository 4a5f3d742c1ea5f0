use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sum_sources, Mixture, SegmentLabel, Source};
use crate::metrics::{write_rttm, DiarAnnotation};
use crate::signal::{read_wav, write_wav};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub speaker_id: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub speaker_id: String,
    pub utterance_id: String,
    pub offset_s: f64,
    pub duration_s: f64,
    pub overlap_fraction: f64,
}

/// JSON document describing one mixture on disk. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureManifest {
    pub id: String,
    pub sample_rate: u32,
    pub num_samples: usize,
    pub mix: String,
    pub sources: Vec<SourceRecord>,
    pub placements: Vec<PlacementRecord>,
    pub labels: Vec<SegmentLabel>,
    pub rttm: String,
    #[serde(default)]
    pub transcripts: Vec<(String, String)>,
}

/// Writes `<id>.mix.wav`, one WAV per source, `<id>.rttm` and `<id>.json` into `dir`.
pub fn write_mixture(
    dir: &Path,
    id: &str,
    m: &Mixture,
    placements: Vec<PlacementRecord>,
) -> Result<MixtureManifest> {
    fs::create_dir_all(dir)?;
    let mix = format!("{id}.mix.wav");
    write_wav(dir.join(&mix), &m.mix)?;
    let mut sources = Vec::new();
    for s in &m.sources {
        let path = format!("{id}.{}.wav", s.speaker_id);
        write_wav(dir.join(&path), &s.audio)?;
        sources.push(SourceRecord {
            speaker_id: s.speaker_id.clone(),
            path,
        });
    }
    let rttm = format!("{id}.rttm");
    write_rttm(&dir.join(&rttm), id, &DiarAnnotation::from_labels(&m.labels))?;
    let manifest = MixtureManifest {
        id: id.to_string(),
        sample_rate: m.sample_rate(),
        num_samples: m.mix.len(),
        mix,
        sources,
        placements,
        labels: m.labels.clone(),
        rttm,
        transcripts: m
            .transcripts
            .iter()
            .map(|(s, w)| (s.clone(), w.join(" ")))
            .collect(),
    };
    fs::write(dir.join(format!("{id}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a mixture from its manifest. The mix is rebuilt as the sum of the
/// stored sources so the source-sum identity survives 16-bit quantisation.
pub fn read_mixture(manifest_path: &Path) -> Result<(MixtureManifest, Mixture)> {
    let manifest: MixtureManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let sources = manifest
        .sources
        .iter()
        .map(|s| {
            Ok(Source {
                speaker_id: s.speaker_id.clone(),
                audio: read_wav(base.join(&s.path))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mix = sum_sources(&sources, manifest.num_samples, manifest.sample_rate);
    let transcripts = manifest
        .transcripts
        .iter()
        .map(|(s, w)| (s.clone(), w.split_whitespace().map(str::to_string).collect()))
        .collect();
    let m = Mixture {
        mix,
        sources,
        labels: manifest.labels.clone(),
        transcripts,
        activity: None,
    };
    Ok((manifest, m))
}
