use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tssep_cli::commands::TrainSummary;
use tssep_cli::config::ExperimentConfig;
use tssep_cli::experiment::{build_examples, synth_split, toy_encoder, toy_pools, Split};
use tssep_cli::manifest::{RunManifest, MANIFEST_FILE};
use tssep_core::embed::{mean_embed, SamplingStrategy, SpeakerEncoder, StrategyKind};
use tssep_core::mixture::MixtureManifest;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth.num_train = 3;
    cfg.synth.num_heldout = 1;
    cfg.stage1.epochs = 2;
    cfg.stage2.epochs = 1;
    cfg
}

fn tssep(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tssep"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) {
    let out = tssep(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Working directory holding `exp.toml` and a synthesised corpus.
fn workspace() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), small_config().to_toml()).unwrap();
        ok(dir.path(), &["--config", "exp.toml", "--out-dir", "corpus", "synth"]);
        dir
    })
    .path()
}

fn heldout_mixture(cwd: &Path) -> (PathBuf, MixtureManifest) {
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cwd.join("corpus/corpus.json")).unwrap()).unwrap();
    let rel = PathBuf::from(index["heldout"][0].as_str().unwrap());
    let m = serde_json::from_str(&std::fs::read_to_string(cwd.join("corpus").join(&rel)).unwrap()).unwrap();
    (Path::new("corpus").join(rel.parent().unwrap()), m)
}

#[test]
fn sep_stage_without_initialisation_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tssep(dir.path(), &["--out-dir", "o", "train", "--corpus", "nowhere", "--stage", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("init_from"), "{err}");
    assert!(!err.contains("panicked"), "{err}");
}

#[test]
fn missing_checkpoint_is_reported_cleanly() {
    let cwd = workspace();
    let (dir, m) = heldout_mixture(cwd);
    let mix = dir.join(&m.mix);
    let out = tssep(
        cwd,
        &["--out-dir", "bad", "infer", "--mix", mix.to_str().unwrap(), "--ckpt", "no-such.ckpt"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("no-such.ckpt") && !err.contains("panicked"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nlatent = 8\nmax_speakers = 4\nsmoothing = 0.1\nwidth = 3\n").unwrap();
    let out = tssep(dir.path(), &["--config", "bad.toml", "--out-dir", "o", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("width"), "{}", stderr(&out));
}

#[test]
fn same_seed_gives_the_same_corpus() {
    let cwd = workspace();
    ok(cwd, &["--config", "exp.toml", "--out-dir", "corpus-again", "synth"]);
    ok(cwd, &["--config", "exp.toml", "--seed", "99", "--out-dir", "corpus-other", "synth"]);
    let load = |d: &str| RunManifest::load(&cwd.join(d).join(MANIFEST_FILE)).unwrap();
    let (a, b, c) = (load("corpus"), load("corpus-again"), load("corpus-other"));
    assert_eq!(a.outputs, b.outputs);
    assert_ne!(a.outputs, c.outputs);
}

#[test]
fn corpus_respects_speaker_and_overlap_limits() {
    let cwd = workspace();
    let m = RunManifest::load(&cwd.join("corpus").join(MANIFEST_FILE)).unwrap();
    assert!(m.metrics["max_speakers"] <= 8.0);
    assert!(m.metrics["max_overlap_fraction"] <= 0.8);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cwd.join("corpus/corpus.json")).unwrap()).unwrap();
    for split in ["train", "heldout"] {
        for rel in index[split].as_array().unwrap() {
            let mm: MixtureManifest =
                serde_json::from_str(&std::fs::read_to_string(cwd.join("corpus").join(rel.as_str().unwrap())).unwrap())
                    .unwrap();
            assert!(mm.sources.len() <= 8);
            assert!(mm.placements.iter().all(|p| p.overlap_fraction <= 0.8));
        }
    }
}

#[test]
fn reference_scored_against_itself_has_zero_der() {
    let cwd = workspace();
    let (dir, m) = heldout_mixture(cwd);
    let rttm = dir.join(&m.rttm);
    let r = rttm.to_str().unwrap();
    ok(cwd, &["--out-dir", "self-score", "score", "--format", "json", "der", "--ref", r, "--hyp", r]);
    let report = RunManifest::load(&cwd.join("self-score").join(MANIFEST_FILE)).unwrap();
    assert_eq!(report.metrics["der"], 0.0);
}

#[test]
fn uniform_mix_draw_statistic_matches_counts() {
    let cwd = workspace();
    ok(cwd, &["--config", "exp.toml", "--out-dir", "s1", "train", "--corpus", "corpus", "--stage", "1"]);
    let summary: TrainSummary =
        serde_json::from_str(&std::fs::read_to_string(cwd.join("s1/train.json")).unwrap()).unwrap();
    let counts = &summary.draw_counts;
    assert_eq!(counts.len(), 4);
    let total: usize = counts.iter().sum();
    assert!(total > 0);
    let e = total as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    assert!((summary.draw_chi_square.unwrap() - chi2).abs() < 1e-12);
    assert!(cwd.join("s1/stage1.ckpt").exists());
    assert!(cwd.join("s1/checkpoints").read_dir().unwrap().count() >= summary.plan.epochs);
}

#[test]
fn v1_sampling_is_the_clean_source_mean() {
    let cfg = small_config();
    let (pool, _) = toy_pools(&cfg).unwrap();
    let mixtures = synth_split(&cfg, &pool, Split::Train).unwrap();
    let enc = toy_encoder(&cfg).unwrap();
    let examples = build_examples(&cfg, &mixtures, &SamplingStrategy::new(StrategyKind::V1), &enc, 5).unwrap();
    for (cm, ex) in mixtures.iter().zip(&examples) {
        let m = &cm.mixture;
        let sr = m.sample_rate() as f64;
        let mut k = 0;
        for src in &m.sources {
            let segs: Vec<_> = m.labels.iter().filter(|l| l.speaker_id == src.speaker_id).collect();
            if segs.is_empty() {
                continue;
            }
            let es: Vec<_> = segs
                .iter()
                .map(|l| {
                    let (a, b) = ((l.start_s * sr).round() as usize, (l.end_s * sr).round() as usize);
                    enc.encode(&src.audio.slice(a, b)).unwrap()
                })
                .collect();
            let want = mean_embed(&es).unwrap();
            assert_eq!(ex.embeddings[k], vec![want], "{} {}", cm.id, src.speaker_id);
            k += 1;
        }
        assert_eq!(k, ex.embeddings.len());
    }
}
