//! The `tssep` subcommands. Every command writes its results and a
//! `manifest.json` into `--out-dir`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tssep_core::cluster::{OracleOverlapDetector, OverlapDetector, WINDOW_S};
use tssep_core::embed::{PrecomputedEmbeddings, SpanEncoder, StrategyKind};
use tssep_core::losses::write_loss_csv;
use tssep_core::metrics::{
    cpwer, der, hungarian, read_rttm, sdr, write_rttm, CpwerReport, DerReport, TranscriptSet, DEFAULT_COLLAR_S,
};
use tssep_core::mixture::{read_mixture, write_mixture, Mixture};
use tssep_core::pipeline::{run_pipeline, PipelineConfig};
use tssep_core::signal::{read_wav, write_wav, Waveform};
use tssep_core::tsnet::{evaluate, load_checkpoint, save_checkpoint, CheckpointMeta, Objective};

use crate::config::ExperimentConfig;
use crate::experiment::{
    build_examples, embed_study, initial_params, synth_split, toy_encoder, toy_pools, train_stage, CorpusMixture,
    Split,
};
use crate::manifest::{compare_runs, ManifestBuilder, ReplayReport, RunManifest, MANIFEST_FILE};

pub const CORPUS_INDEX: &str = "corpus.json";

#[derive(Debug, Parser)]
#[command(name = "tssep", version, about = "Enrollment-free target-speaker separation and diarization toolkit")]
pub struct Cli {
    /// Overrides the experiment seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment configuration (TOML). Built-in defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    V1,
    V2,
    V3,
    V4,
    UniformMix,
}

impl From<SamplingArg> for StrategyKind {
    fn from(a: SamplingArg) -> Self {
        match a {
            SamplingArg::V1 => StrategyKind::V1,
            SamplingArg::V2 => StrategyKind::V2,
            SamplingArg::V3 => StrategyKind::V3,
            SamplingArg::V4 => StrategyKind::V4,
            SamplingArg::UniformMix => StrategyKind::UniformMix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise the toy corpus: train and held-out mixtures with labels.
    Synth,
    /// Train stage 1 (speaker-dependent VAD) or stage 2 (separation).
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to start from; overrides the stage plan.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Start a separation stage from random weights.
        #[arg(long)]
        random_init: bool,
        /// Reuse one embedding draw per (mixture, speaker) in every epoch.
        #[arg(long)]
        freeze_sampling: bool,
        #[arg(long, value_enum)]
        sampling: Option<SamplingArg>,
    },
    /// Separate and diarize a recording.
    Infer {
        #[arg(long)]
        mix: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        vad_threshold_db: Option<f64>,
        #[arg(long)]
        num_speakers: Option<usize>,
        /// Enables overlap filtering with an oracle detector built from this RTTM.
        #[arg(long)]
        reference_rttm: Option<PathBuf>,
        /// Stem of precomputed embeddings (`<stem>.f32` + `<stem>.json`) to use instead of the toy encoder.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score diarization, separation or transcripts.
    Score {
        #[arg(long, value_enum, default_value = "table")]
        format: OutputFormat,
        #[command(subcommand)]
        metric: ScoreCommand,
    },
    /// V1-V4 embedding similarity and overlap-filter purity report.
    EmbedStudy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "heldout")]
        split: SplitArg,
    },
    /// Re-run a command from its manifest and compare the results.
    Replay { manifest: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
}

#[derive(Debug, Subcommand)]
pub enum ScoreCommand {
    Der {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = DEFAULT_COLLAR_S)]
        collar: f64,
    },
    /// Pairs estimates with references by maximum total SDR.
    Sdr {
        #[arg(long = "ref", required = true)]
        reference: Vec<PathBuf>,
        #[arg(long = "est", required = true)]
        estimate: Vec<PathBuf>,
        /// Mixture, to report the unprocessed baseline.
        #[arg(long)]
        mix: Option<PathBuf>,
    },
    /// Transcripts are JSON objects mapping speaker (or channel) to text.
    Cpwer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: Vec<String>) -> anyhow::Result<()> {
    let cli = Cli::try_parse_from(&args).map_err(|e| {
        if e.use_stderr() {
            anyhow::anyhow!("{e}")
        } else {
            // --help and --version
            print!("{e}");
            std::process::exit(0)
        }
    })?;
    let argv = strip_out_dir(&args[1..]);
    execute(cli, argv)
}

fn strip_out_dir(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--out-dir" {
            skip = true;
        } else if !a.starts_with("--out-dir=") {
            out.push(a.clone());
        }
    }
    out
}

struct Ctx {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
    manifest: ManifestBuilder,
}

fn execute(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, &cli.out_dir);
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let name = match &cli.command {
        Command::Synth => "synth",
        Command::Train { .. } => "train",
        Command::Infer { .. } => "infer",
        Command::Score { .. } => "score",
        Command::EmbedStudy { .. } => "embed-study",
        Command::Replay { .. } => unreachable!("handled above"),
    };
    let mut manifest = ManifestBuilder::new(name, argv, &cfg, cfg.seed, &cli.out_dir);
    if let Some(p) = &cli.config {
        manifest.input(p)?;
    }
    let mut ctx = Ctx {
        cfg,
        out_dir: cli.out_dir.clone(),
        manifest,
    };
    tracing::info!(command = name, out_dir = %ctx.out_dir.display(), seed = ctx.cfg.seed, "start");
    match cli.command {
        Command::Synth => synth(&mut ctx)?,
        Command::Train {
            corpus,
            stage,
            init_from,
            random_init,
            freeze_sampling,
            sampling,
        } => train(&mut ctx, &corpus, stage, init_from, random_init, freeze_sampling, sampling)?,
        Command::Infer {
            mix,
            ckpt,
            vad_threshold_db,
            num_speakers,
            reference_rttm,
            embeddings,
        } => infer(&mut ctx, &mix, &ckpt, vad_threshold_db, num_speakers, reference_rttm, embeddings)?,
        Command::Score { format, metric } => score(&mut ctx, metric, format)?,
        Command::EmbedStudy { corpus, split } => study(&mut ctx, &corpus, split)?,
        Command::Replay { .. } => unreachable!("handled above"),
    }
    let m = ctx.manifest.finish()?;
    tracing::info!(command = name, metrics = ?m.metrics, "done");
    Ok(())
}

fn write_json(ctx: &mut Ctx, rel: &str, value: &impl Serialize, deterministic: bool) -> anyhow::Result<()> {
    fs::write(ctx.out_dir.join(rel), serde_json::to_string_pretty(value)?)?;
    ctx.manifest.output(rel, deterministic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub config: ExperimentConfig,
    /// Manifest paths relative to the corpus directory.
    pub train: Vec<PathBuf>,
    pub heldout: Vec<PathBuf>,
}

fn synth(ctx: &mut Ctx) -> anyhow::Result<()> {
    let cfg = ctx.cfg.clone();
    let (train_pool, heldout_pool) = toy_pools(&cfg)?;
    let mut index = CorpusIndex {
        config: cfg.clone(),
        train: Vec::new(),
        heldout: Vec::new(),
    };
    let (mut max_k, mut max_overlap, mut total_s) = (0usize, 0f64, 0f64);
    for (split, pool) in [(Split::Train, &train_pool), (Split::Heldout, &heldout_pool)] {
        for cm in synth_split(&cfg, pool, split)? {
            let k = cm.mixture.num_speakers();
            let ov = cm.placements.iter().map(|p| p.overlap_fraction).fold(0.0, f64::max);
            if k > tssep_core::cluster::K_MAX || ov > 0.8 {
                bail!("mixture {} violates the corpus limits ({k} speakers, overlap {ov})", cm.id);
            }
            max_k = max_k.max(k);
            max_overlap = max_overlap.max(ov);
            total_s += cm.mixture.duration_s();
            let dir = ctx.out_dir.join(split.name());
            let m = write_mixture(&dir, &cm.id, &cm.mixture, cm.placements.clone())?;
            let rel = PathBuf::from(split.name());
            for f in std::iter::once(m.mix.clone())
                .chain(m.sources.iter().map(|s| s.path.clone()))
                .chain([m.rttm.clone(), format!("{}.json", m.id)])
            {
                ctx.manifest.output(rel.join(f), true)?;
            }
            let entry = rel.join(format!("{}.json", m.id));
            match split {
                Split::Train => index.train.push(entry),
                Split::Heldout => index.heldout.push(entry),
            }
        }
    }
    write_json(ctx, CORPUS_INDEX, &index, true)?;
    ctx.manifest.metric("num_train", index.train.len() as f64);
    ctx.manifest.metric("num_heldout", index.heldout.len() as f64);
    ctx.manifest.metric("max_speakers", max_k as f64);
    ctx.manifest.metric("max_overlap_fraction", max_overlap);
    ctx.manifest.metric("total_duration_s", total_s);
    tracing::info!(train = index.train.len(), heldout = index.heldout.len(), total_s, "corpus written");
    Ok(())
}

/// Loads one split of a corpus written by `synth`, recording every file read.
fn load_split(ctx: &mut Ctx, corpus: &Path, split: Split) -> anyhow::Result<Vec<CorpusMixture>> {
    let index_path = corpus.join(CORPUS_INDEX);
    let index: CorpusIndex = serde_json::from_str(
        &fs::read_to_string(&index_path).with_context(|| format!("reading {}", index_path.display()))?,
    )?;
    let entries = match split {
        Split::Train => &index.train,
        Split::Heldout => &index.heldout,
    };
    entries
        .iter()
        .map(|rel| {
            let path = corpus.join(rel);
            let (manifest, mixture): (_, Mixture) =
                read_mixture(&path).with_context(|| format!("reading mixture {}", path.display()))?;
            ctx.manifest.input(&path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            for s in &manifest.sources {
                ctx.manifest.input(&base.join(&s.path))?;
            }
            Ok(CorpusMixture {
                id: manifest.id,
                mixture,
                placements: manifest.placements,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: u8,
    pub plan: crate::config::StagePlan,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Oracle-embedding loss on the held-out split (BCE or `l_sep`).
    pub heldout_loss: f64,
    pub draw_counts: Vec<usize>,
    /// Pearson statistic of the draw counts against a uniform distribution.
    pub draw_chi_square: Option<f64>,
}

fn chi_square_uniform(counts: &[usize]) -> Option<f64> {
    let total: usize = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return None;
    }
    let e = total as f64 / counts.len() as f64;
    Some(counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum())
}

#[allow(clippy::too_many_arguments)]
fn train(
    ctx: &mut Ctx,
    corpus: &Path,
    stage: u8,
    init_from: Option<PathBuf>,
    random_init: bool,
    freeze_sampling: bool,
    sampling: Option<SamplingArg>,
) -> anyhow::Result<()> {
    let cfg = ctx.cfg.clone();
    let mut plan = cfg.stage(stage)?.clone();
    if init_from.is_some() {
        plan.init_from = init_from;
    }
    plan.random_init |= random_init;
    plan.freeze_sampling |= freeze_sampling;
    if let Some(s) = sampling {
        plan.sampling.kind = s.into();
    }
    plan.validate()?;
    let loaded = match &plan.init_from {
        Some(p) => {
            let (params, _) = load_checkpoint(p)?;
            ctx.manifest.input(p)?;
            Some(params)
        }
        None => None,
    };
    let init = initial_params(&cfg, &plan, loaded)?;
    let train_set = load_split(ctx, corpus, Split::Train)?;
    let heldout_set = load_split(ctx, corpus, Split::Heldout)?;
    let encoder = toy_encoder(&cfg)?;
    let seed = cfg.stage_seed(&plan);
    let examples = build_examples(&cfg, &train_set, &plan.sampling, &encoder, seed)?;
    tracing::info!(stage, mixtures = examples.len(), sampling = ?plan.sampling.kind, "training");
    let ckpt_dir = ctx.out_dir.join("checkpoints");
    let outcome = train_stage(&cfg, &plan, &init, &examples, Some(ckpt_dir))?;
    for p in &outcome.checkpoints {
        let rel = p.strip_prefix(&ctx.out_dir).unwrap_or(p).to_path_buf();
        ctx.manifest.output(rel, true)?;
    }
    let final_name = format!("stage{stage}.ckpt");
    save_checkpoint(
        &ctx.out_dir.join(&final_name),
        &outcome.params,
        &CheckpointMeta {
            seed,
            step: outcome.steps,
            stage: Some(stage),
        },
    )?;
    ctx.manifest.output(&final_name, true)?;
    write_loss_csv(&ctx.out_dir.join("loss.csv"), &outcome.curve)?;
    ctx.manifest.output("loss.csv", true)?;

    let objective = plan.objective();
    let heldout_loss = if heldout_set.is_empty() {
        f64::NAN
    } else {
        let strategy = tssep_core::embed::SamplingStrategy::new(StrategyKind::V1);
        let data = build_examples(&cfg, &heldout_set, &strategy, &encoder, seed)?;
        evaluate(&outcome.params, &data, &objective)?
    };
    let chi2 = match plan.sampling.kind {
        StrategyKind::UniformMix => chi_square_uniform(&outcome.draw_counts),
        _ => None,
    };
    if let Some(c) = chi2 {
        tracing::info!(counts = ?outcome.draw_counts, chi_square = c, "embedding variant draws");
    }
    let summary = TrainSummary {
        stage,
        plan: plan.clone(),
        steps: outcome.steps,
        initial_loss: outcome.curve.first().map_or(f64::NAN, |r| r.combined),
        final_loss: outcome.curve.last().map_or(f64::NAN, |r| r.combined),
        heldout_loss,
        draw_counts: outcome.draw_counts.clone(),
        draw_chi_square: chi2,
    };
    write_json(ctx, "train.json", &summary, true)?;
    ctx.manifest.metric("steps", summary.steps as f64);
    ctx.manifest.metric("final_loss", summary.final_loss);
    ctx.manifest.metric("heldout_loss", heldout_loss);
    if let Some(c) = chi2 {
        ctx.manifest.metric("draw_chi_square", c);
    }
    if matches!(objective, Objective::Sep { .. }) {
        ctx.manifest.metric("final_l_sep", outcome.curve.last().and_then(|r| r.l_sep).unwrap_or(f64::NAN));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer(
    ctx: &mut Ctx,
    mix_path: &Path,
    ckpt: &Path,
    vad_threshold_db: Option<f64>,
    num_speakers: Option<usize>,
    reference_rttm: Option<PathBuf>,
    embeddings: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = ctx.cfg.clone();
    let (params, _) = load_checkpoint(ckpt)?;
    ctx.manifest.input(ckpt)?;
    let mix = read_wav(mix_path)?;
    ctx.manifest.input(mix_path)?;
    let encoder: Box<dyn SpanEncoder> = match &embeddings {
        Some(stem) => {
            let e = PrecomputedEmbeddings::load(stem)?;
            ctx.manifest.input(&stem.with_extension("f32"))?;
            ctx.manifest.input(&stem.with_extension("json"))?;
            Box::new(e)
        }
        None => Box::new(toy_encoder(&cfg)?),
    };
    let detector: Option<Box<dyn OverlapDetector>> = match &reference_rttm {
        Some(p) => {
            let (_, ann) = read_rttm(p)?;
            ctx.manifest.input(p)?;
            Some(Box::new(OracleOverlapDetector::new(ann)))
        }
        None => None,
    };
    let pcfg = PipelineConfig {
        vad_threshold_db: vad_threshold_db.unwrap_or(cfg.infer.vad_threshold_db),
        segmentation: cfg.infer.segmentation,
        num_speakers: num_speakers.or(cfg.infer.num_speakers),
        mask_threshold: cfg.infer.mask_threshold,
        stft: cfg.features.stft()?,
        window_s: WINDOW_S,
        seed: cfg.seed,
    };
    let out = run_pipeline(&mix, &params, encoder.as_ref(), detector.as_deref(), &pcfg)?;
    for (i, w) in out.sources.iter().enumerate() {
        let name = format!("spk{i}.wav");
        write_wav(ctx.out_dir.join(&name), w)?;
        ctx.manifest.output(&name, true)?;
        ctx.manifest.metric(&format!("spk{i}_rms"), w.rms());
    }
    let file_id = mix_path.file_stem().and_then(|s| s.to_str()).unwrap_or("mix");
    let file_id = file_id.strip_suffix(".mix").unwrap_or(file_id);
    write_rttm(&ctx.out_dir.join("hyp.rttm"), file_id, &out.diarization)?;
    ctx.manifest.output("hyp.rttm", true)?;
    write_json(ctx, "pipeline.json", &out.report, false)?;
    ctx.manifest.metric("num_speakers", out.sources.len() as f64);
    ctx.manifest.metric("voiced_s", out.report.voiced_s);
    ctx.manifest.metric("windows_kept", out.report.windows_kept as f64);
    tracing::info!(speakers = out.sources.len(), voiced_s = out.report.voiced_s, "inference done");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrPair {
    pub reference: PathBuf,
    pub estimate: Option<PathBuf>,
    pub sdr_db: f64,
    pub mixture_sdr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrReport {
    pub pairs: Vec<SdrPair>,
    pub mean_sdr_db: f64,
    pub mean_mixture_sdr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "lowercase")]
pub enum ScoreReport {
    Der(DerReport),
    Sdr(SdrReport),
    Cpwer(CpwerReport),
}

/// Estimates are matched to references by maximum total SDR; an unmatched
/// reference scores against silence (0 dB).
pub fn score_sdr(refs: &[Waveform], ests: &[Waveform]) -> anyhow::Result<Vec<(Option<usize>, f64)>> {
    let table = refs
        .iter()
        .map(|r| ests.iter().map(|e| sdr(r, e)).collect::<tssep_core::Result<Vec<_>>>())
        .collect::<tssep_core::Result<Vec<_>>>()?;
    let cost: Vec<Vec<f64>> = table.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    Ok(hungarian(&cost)
        .into_iter()
        .enumerate()
        .map(|(i, j)| (j, j.map_or(0.0, |j| table[i][j])))
        .collect())
}

fn load_transcripts(path: &Path) -> anyhow::Result<TranscriptSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let map: BTreeMap<String, String> =
        serde_json::from_str(&text).with_context(|| format!("parsing transcripts {}", path.display()))?;
    Ok(TranscriptSet::from_texts(map.iter().map(|(k, v)| (k.as_str(), v.as_str()))))
}

fn score(ctx: &mut Ctx, metric: ScoreCommand, format: OutputFormat) -> anyhow::Result<()> {
    let report = match metric {
        ScoreCommand::Der { reference, hyp, collar } => {
            let (_, r) = read_rttm(&reference).with_context(|| format!("reading {}", reference.display()))?;
            let (_, h) = read_rttm(&hyp).with_context(|| format!("reading {}", hyp.display()))?;
            ctx.manifest.input(&reference)?;
            ctx.manifest.input(&hyp)?;
            let rep = der(&r, &h, collar)?;
            ctx.manifest.metric("der", rep.der);
            ScoreReport::Der(rep)
        }
        ScoreCommand::Sdr { reference, estimate, mix } => {
            let refs = reference.iter().map(read_wav).collect::<tssep_core::Result<Vec<_>>>()?;
            let ests = estimate.iter().map(read_wav).collect::<tssep_core::Result<Vec<_>>>()?;
            for p in reference.iter().chain(&estimate) {
                ctx.manifest.input(p)?;
            }
            let mix_wav = match &mix {
                Some(p) => {
                    ctx.manifest.input(p)?;
                    Some(read_wav(p)?)
                }
                None => None,
            };
            let matched = score_sdr(&refs, &ests)?;
            let pairs = matched
                .iter()
                .enumerate()
                .map(|(i, (j, v))| {
                    Ok(SdrPair {
                        reference: reference[i].clone(),
                        estimate: j.map(|j| estimate[j].clone()),
                        sdr_db: *v,
                        mixture_sdr_db: mix_wav.as_ref().map(|m| sdr(&refs[i], m)).transpose()?,
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let n = pairs.len() as f64;
            let rep = SdrReport {
                mean_sdr_db: pairs.iter().map(|p| p.sdr_db).sum::<f64>() / n,
                mean_mixture_sdr_db: mix_wav
                    .as_ref()
                    .map(|_| pairs.iter().filter_map(|p| p.mixture_sdr_db).sum::<f64>() / n),
                pairs,
            };
            ctx.manifest.metric("mean_sdr_db", rep.mean_sdr_db);
            if let Some(b) = rep.mean_mixture_sdr_db {
                ctx.manifest.metric("mean_mixture_sdr_db", b);
            }
            ScoreReport::Sdr(rep)
        }
        ScoreCommand::Cpwer { reference, hyp } => {
            let r = load_transcripts(&reference)?;
            let h = load_transcripts(&hyp)?;
            ctx.manifest.input(&reference)?;
            ctx.manifest.input(&hyp)?;
            let rep = cpwer(&r, &h)?;
            ctx.manifest.metric("cpwer", rep.cpwer);
            ScoreReport::Cpwer(rep)
        }
    };
    write_json(ctx, "score.json", &report, true)?;
    match format {
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        OutputFormat::Table => print!("{}", render_table(&report)),
    }
    Ok(())
}

pub fn render_table(report: &ScoreReport) -> String {
    let mut s = String::new();
    match report {
        ScoreReport::Der(r) => {
            s += &format!("{:<22}{:>10}\n", "metric", "value");
            for (k, v) in [
                ("DER", r.der),
                ("missed (s)", r.missed_s),
                ("false alarm (s)", r.false_alarm_s),
                ("confusion (s)", r.confusion_s),
                ("scored reference (s)", r.scored_reference_s),
            ] {
                s += &format!("{k:<22}{v:>10.4}\n");
            }
        }
        ScoreReport::Sdr(r) => {
            s += &format!("{:<40}{:<40}{:>10}{:>10}\n", "reference", "estimate", "SDR dB", "mix dB");
            for p in &r.pairs {
                let est = p.estimate.as_ref().map_or("-".to_string(), |e| e.display().to_string());
                let mix = p.mixture_sdr_db.map_or("-".to_string(), |v| format!("{v:.2}"));
                s += &format!("{:<40}{:<40}{:>10.2}{:>10}\n", p.reference.display(), est, p.sdr_db, mix);
            }
            s += &format!("{:<80}{:>10.2}\n", "mean", r.mean_sdr_db);
        }
        ScoreReport::Cpwer(r) => {
            s += &format!("cpWER {:.4} ({} errors / {} words)\n", r.cpwer, r.errors, r.reference_words);
            for (a, b) in &r.assignment {
                s += &format!("  {} -> {}\n", a.as_deref().unwrap_or("-"), b.as_deref().unwrap_or("-"));
            }
        }
    }
    s
}

fn study(ctx: &mut Ctx, corpus: &Path, split: SplitArg) -> anyhow::Result<()> {
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
    };
    let mixtures = load_split(ctx, corpus, split)?;
    let encoder = toy_encoder(&ctx.cfg)?;
    let report = embed_study(&mixtures, &encoder, ctx.cfg.seed)?;
    write_json(ctx, "embed_study.json", &report, true)?;
    println!("{:<8}{:>14}{:>14}{:>10}", "variant", "cos(oracle)", "cos(others)", "fallback");
    for v in &report.variants {
        let others = v.mean_cosine_to_others.map_or("-".to_string(), |c| format!("{c:.4}"));
        println!("{:<8}{:>14.4}{:>14}{:>10}", format!("{:?}", v.variant), v.mean_cosine_to_oracle, others, v.fallbacks);
    }
    println!(
        "purity over {} mixtures: all windows {:.4}, overlap-filtered {:.4}",
        report.purity.len(),
        report.mean_purity_all,
        report.mean_purity_filtered
    );
    ctx.manifest.metric("mean_purity_all", report.mean_purity_all);
    ctx.manifest.metric("mean_purity_filtered", report.mean_purity_filtered);
    Ok(())
}

fn replay(manifest_path: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let original = RunManifest::load(manifest_path)?;
    original.check_inputs()?;
    let mut args = vec!["tssep".to_string()];
    args.extend(original.argv.iter().cloned());
    let cli = Cli::try_parse_from(&args).with_context(|| "manifest arguments no longer parse")?;
    if matches!(cli.command, Command::Replay { .. }) {
        bail!("a replay manifest cannot be replayed");
    }
    let cli = Cli {
        out_dir: out_dir.to_path_buf(),
        ..cli
    };
    execute(cli, original.argv.clone())?;
    let replayed = RunManifest::load(&out_dir.join(MANIFEST_FILE))?;
    let report: ReplayReport = compare_runs(&original, &replayed);
    fs::write(out_dir.join("replay.json"), serde_json::to_string_pretty(&report)?)?;
    if !report.identical {
        bail!(
            "replay differs: {:?} {:?}",
            report.metric_mismatches,
            report.output_mismatches
        );
    }
    tracing::info!(manifest = %manifest_path.display(), "replay identical");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_is_removed_from_recorded_arguments() {
        let args: Vec<String> = ["synth", "--out-dir", "a", "--seed", "3", "--out-dir=b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(strip_out_dir(&args), vec!["synth", "--seed", "3"]);
    }

    #[test]
    fn chi_square_of_uniform_counts_is_zero() {
        assert_eq!(chi_square_uniform(&[5, 5, 5, 5]), Some(0.0));
        assert_eq!(chi_square_uniform(&[10, 0]), Some(10.0));
        assert_eq!(chi_square_uniform(&[3]), None);
    }

    #[test]
    fn sdr_pairs_follow_the_best_permutation() {
        let a = Waveform::new((0..100).map(|n| (n as f64 * 0.3).sin()).collect(), 16_000).unwrap();
        let b = Waveform::new((0..100).map(|n| (n as f64 * 0.7).cos()).collect(), 16_000).unwrap();
        let m = score_sdr(&[a.clone(), b.clone()], &[b, a]).unwrap();
        assert_eq!(m[0].0, Some(1));
        assert_eq!(m[1].0, Some(0));
        assert!(m.iter().all(|(_, v)| *v >= 99.0));
    }
}
