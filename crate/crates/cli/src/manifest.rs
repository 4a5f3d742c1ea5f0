//! Run manifests: what a command read, what it wrote and the numbers it
//! produced, so the run can be repeated and compared bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputFile {
    /// Relative to the run's output directory.
    pub path: PathBuf,
    pub sha256: String,
    /// False for files that embed timings.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, without `--out-dir`.
    pub argv: Vec<String>,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<OutputFile>,
    pub metrics: BTreeMap<String, f64>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Collects inputs, outputs and metrics while a command runs.
#[derive(Debug)]
pub struct ManifestBuilder {
    command: String,
    argv: Vec<String>,
    config: ExperimentConfig,
    seed: u64,
    out_dir: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<OutputFile>,
    metrics: BTreeMap<String, f64>,
    started: u64,
}

impl ManifestBuilder {
    pub fn new(command: &str, argv: Vec<String>, config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            argv,
            config: config.clone(),
            seed,
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            started: unix_now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileHash {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Records a file written under the output directory.
    pub fn output(&mut self, rel: impl AsRef<Path>, deterministic: bool) -> anyhow::Result<()> {
        let rel = rel.as_ref();
        let sha256 = sha256_file(&self.out_dir.join(rel))?;
        self.outputs.push(OutputFile {
            path: rel.to_path_buf(),
            sha256,
            deterministic,
        });
        Ok(())
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn finish(mut self) -> anyhow::Result<RunManifest> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let m = RunManifest {
            command: self.command,
            argv: self.argv,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            metrics: self.metrics,
            started_unix_s: self.started,
            finished_unix_s: unix_now(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        fs::write(self.out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fails when an input no longer has its recorded content.
    pub fn check_inputs(&self) -> anyhow::Result<()> {
        for f in &self.inputs {
            let now = sha256_file(&f.path)?;
            if now != f.sha256 {
                bail!("input {} changed since the run (sha256 {} != {})", f.path.display(), now, f.sha256);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub identical: bool,
    pub metric_mismatches: Vec<String>,
    pub output_mismatches: Vec<String>,
}

/// Compares metrics by bit pattern and deterministic outputs by hash.
pub fn compare_runs(original: &RunManifest, replay: &RunManifest) -> ReplayReport {
    let mut metric_mismatches = Vec::new();
    let names: std::collections::BTreeSet<&String> = original.metrics.keys().chain(replay.metrics.keys()).collect();
    for name in names {
        let (a, b) = (original.metrics.get(name), replay.metrics.get(name));
        if a.map(|v| v.to_bits()) != b.map(|v| v.to_bits()) {
            metric_mismatches.push(format!("{name}: {a:?} != {b:?}"));
        }
    }
    let replayed: BTreeMap<&Path, &OutputFile> = replay.outputs.iter().map(|o| (o.path.as_path(), o)).collect();
    let mut output_mismatches = Vec::new();
    for o in original.outputs.iter().filter(|o| o.deterministic) {
        match replayed.get(o.path.as_path()) {
            Some(r) if r.sha256 == o.sha256 => {}
            Some(_) => output_mismatches.push(format!("{} differs", o.path.display())),
            None => output_mismatches.push(format!("{} missing", o.path.display())),
        }
    }
    ReplayReport {
        identical: metric_mismatches.is_empty() && output_mismatches.is_empty(),
        metric_mismatches,
        output_mismatches,
    }
}
