//! Corpus synthesis, training-set construction and the evaluation studies
//! shared by the commands and the acceptance suite.

use std::collections::BTreeMap;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tssep_core::cluster::{
    dominant_speaker, extract_windows, overlap_filter, purity, spectral_cluster,
    OracleOverlapDetector, WINDOW_S,
};
use tssep_core::embed::{
    sample_embedding, EmbeddingVariant, SamplingStrategy, SpeakerEncoder, StrategyKind, ToyEncoder,
};
use tssep_core::metrics::{sdr, DiarAnnotation};
use tssep_core::mixture::{
    chunk_at, compute_activity_labels, plan_mixture, render_plan, Mixture, PlacementRecord, ToyCorpus, Utterance,
};
use tssep_core::pipeline::boundary_discontinuity;
use tssep_core::rng;
use tssep_core::signal::{Stft, Waveform};
use tssep_core::tsnet::{
    evaluate, init_stage2, log_magnitude_features, separate, train, HeadKind, Objective, SepTarget, TrainConfig,
    TrainExample, TrainOutcome, TsNetParams,
};

use crate::config::{ExperimentConfig, StagePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x71,
            Split::Heldout => 0x4d,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusMixture {
    pub id: String,
    pub mixture: Mixture,
    pub placements: Vec<PlacementRecord>,
}

/// The toy utterance pool. Every fourth utterance of each speaker is kept
/// for held-out mixtures.
pub fn toy_pools(cfg: &ExperimentConfig) -> anyhow::Result<(Vec<Utterance>, Vec<Utterance>)> {
    let mut corpus_cfg = cfg.corpus.clone();
    corpus_cfg.seed = rng::derive_seed(cfg.seed, &[0xc0]);
    let corpus = ToyCorpus::generate(&corpus_cfg)?;
    let per = corpus_cfg.utterances_per_speaker;
    if per < 2 {
        bail!("need at least 2 utterances per speaker to form a held-out pool");
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, u) in corpus.utterances.into_iter().enumerate() {
        if i % per % 4 == 3 || (per < 4 && i % per == per - 1) {
            heldout.push(u);
        } else {
            train.push(u);
        }
    }
    Ok((train, heldout))
}

/// Draws mixture `index` of a split; deterministic in the experiment seed.
pub fn synth_one(cfg: &ExperimentConfig, pool: &[Utterance], split: Split, index: usize) -> anyhow::Result<CorpusMixture> {
    let seed = rng::derive_seed(cfg.seed, &[split.tag(), index as u64]);
    let plan = plan_mixture(pool, &cfg.synth.mixture, seed)?;
    let full = render_plan(pool, &plan)?;
    let sr = plan.sample_rate as f64;
    let (mixture, offset) = match cfg.synth.chunk_s {
        Some(len_s) if len_s < full.duration_s() => {
            let max_off = full.mix.len() - (len_s * sr).round() as usize;
            let off = rand::Rng::gen_range(&mut rng::stream(seed, &[0xc4]), 0..=max_off);
            (chunk_at(&full, off as f64 / sr, len_s)?, off as f64 / sr)
        }
        _ => (full, 0.0),
    };
    let end = offset + mixture.duration_s();
    let placements = plan
        .placements
        .iter()
        .filter_map(|p| {
            let start = p.offset as f64 / sr;
            let dur = pool[p.utterance].audio.duration_s();
            (start < end && start + dur > offset).then(|| PlacementRecord {
                speaker_id: p.speaker_id.clone(),
                utterance_id: pool[p.utterance].id.clone(),
                offset_s: start - offset,
                duration_s: dur,
                overlap_fraction: p.overlap_fraction,
            })
        })
        .collect();
    Ok(CorpusMixture {
        id: format!("{}-{index:04}", split.name()),
        mixture,
        placements,
    })
}

/// All mixtures of a split, synthesised on worker threads.
pub fn synth_split(cfg: &ExperimentConfig, pool: &[Utterance], split: Split) -> anyhow::Result<Vec<CorpusMixture>> {
    let n = match split {
        Split::Train => cfg.synth.num_train,
        Split::Heldout => cfg.synth.num_heldout,
    };
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    let mut slots: Vec<Option<anyhow::Result<CorpusMixture>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(n.div_ceil(workers).max(1)).enumerate() {
            let base = w * n.div_ceil(workers).max(1);
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(synth_one(cfg, pool, split, base + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

pub fn toy_encoder(cfg: &ExperimentConfig) -> anyhow::Result<ToyEncoder> {
    Ok(ToyEncoder::new(cfg.encoder, cfg.corpus.sample_rate)?)
}

/// Candidate embeddings of one speaker: one per variant for `UNIFORM_MIX`,
/// otherwise the requested variant alone.
pub fn candidate_embeddings(
    m: &Mixture,
    speaker: &str,
    strategy: &SamplingStrategy,
    encoder: &dyn SpeakerEncoder,
    seed: u64,
) -> anyhow::Result<Vec<tssep_core::embed::SpeakerEmbedding>> {
    let kinds: Vec<StrategyKind> = match strategy.kind {
        StrategyKind::UniformMix => vec![StrategyKind::V1, StrategyKind::V2, StrategyKind::V3, StrategyKind::V4],
        k => vec![k],
    };
    kinds
        .into_iter()
        .map(|kind| {
            let s = SamplingStrategy { kind, ..*strategy };
            Ok(sample_embedding(m, speaker, &s, encoder, seed)?.embedding)
        })
        .collect()
}

/// Keeps only speakers that talk inside the mixture.
fn active_speakers(m: &Mixture) -> Mixture {
    let mut out = m.clone();
    out.sources.retain(|s| m.labels.iter().any(|l| l.speaker_id == s.speaker_id));
    out
}

/// Features, embeddings and targets for each mixture.
pub fn build_examples(
    cfg: &ExperimentConfig,
    mixtures: &[CorpusMixture],
    strategy: &SamplingStrategy,
    encoder: &dyn SpeakerEncoder,
    seed: u64,
) -> anyhow::Result<Vec<TrainExample>> {
    let stft_cfg = cfg.features.stft()?;
    let stft = Stft::new(stft_cfg)?;
    mixtures
        .iter()
        .enumerate()
        .map(|(i, cm)| {
            let m = active_speakers(&cm.mixture);
            let spec = stft.forward(&m.mix);
            let features = log_magnitude_features(&spec);
            let activity = compute_activity_labels(&m, &stft_cfg, cfg.features.activity_threshold_db);
            let ex_seed = rng::derive_seed(seed, &[0xe0, i as u64]);
            let embeddings = m
                .speaker_ids()
                .iter()
                .map(|s| candidate_embeddings(&m, s, strategy, encoder, ex_seed))
                .collect::<anyhow::Result<Vec<_>>>()
                .with_context(|| format!("embedding speakers of {}", cm.id))?;
            let sources: Vec<Waveform> = m.sources.iter().map(|s| s.audio.clone()).collect();
            Ok(TrainExample {
                features,
                embeddings,
                vad_targets: Some(activity.rows),
                sep: Some(SepTarget::new(&m.mix, &sources, &stft)?),
            })
        })
        .collect()
}

/// Starting weights for a stage: random for VAD, converted from a VAD
/// checkpoint (or continued from a mask checkpoint) for separation.
pub fn initial_params(
    cfg: &ExperimentConfig,
    plan: &StagePlan,
    loaded: Option<TsNetParams>,
) -> anyhow::Result<TsNetParams> {
    let seed = rng::derive_seed(cfg.stage_seed(plan), &[0x1a]);
    let head = plan.head();
    let p = match (loaded, head) {
        (None, HeadKind::Vad) => TsNetParams::random(cfg.dims(), HeadKind::Vad, seed)?,
        (None, HeadKind::Mask) if plan.random_init => TsNetParams::random(cfg.dims(), HeadKind::Mask, seed)?,
        (None, HeadKind::Mask) => bail!("a sep stage needs init_from or random_init = true"),
        (Some(p), HeadKind::Mask) if p.head_kind == HeadKind::Vad => init_stage2(&p)?,
        (Some(p), h) if p.head_kind == h => p,
        (Some(_), h) => bail!("cannot start a {h:?} stage from a mask checkpoint"),
    };
    if p.dims != cfg.dims() {
        bail!("checkpoint dimensions {:?} do not match the configuration {:?}", p.dims, cfg.dims());
    }
    Ok(p)
}

pub fn train_stage(
    cfg: &ExperimentConfig,
    plan: &StagePlan,
    init: &TsNetParams,
    examples: &[TrainExample],
    checkpoint_dir: Option<std::path::PathBuf>,
) -> anyhow::Result<TrainOutcome> {
    let tc = TrainConfig {
        objective: plan.objective(),
        optimizer: plan.optimizer,
        epochs: plan.epochs,
        max_steps: plan.max_steps,
        seed: cfg.stage_seed(plan),
        freeze_sampling: plan.freeze_sampling,
        checkpoint_dir,
    };
    Ok(train(init, examples, &tc)?)
}

/// Held-out `l_sep` averaged over the four embedding variants.
pub fn heldout_sep_loss(
    cfg: &ExperimentConfig,
    params: &TsNetParams,
    mixtures: &[CorpusMixture],
    encoder: &dyn SpeakerEncoder,
) -> anyhow::Result<f64> {
    let objective = Objective::Sep { osl: Default::default() };
    let mut total = 0.0;
    for kind in [StrategyKind::V1, StrategyKind::V2, StrategyKind::V3, StrategyKind::V4] {
        let data = build_examples(cfg, mixtures, &SamplingStrategy::new(kind), encoder, rng::derive_seed(cfg.seed, &[0xe7]))?;
        total += evaluate(params, &data, &objective)?;
    }
    Ok(total / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationQuality {
    /// Mean magnitude jump between adjacent frames at reference boundaries.
    pub boundary_jump: f64,
    /// Mean SDR of the estimates against the clean sources, in dB.
    pub sdr_db: f64,
    /// Mean SDR of the unprocessed mixture against the clean sources.
    pub mixture_sdr_db: f64,
}

/// Separates each held-out mixture with oracle (V1) embeddings.
pub fn separation_quality(
    cfg: &ExperimentConfig,
    params: &TsNetParams,
    mixtures: &[CorpusMixture],
    encoder: &dyn SpeakerEncoder,
) -> anyhow::Result<SeparationQuality> {
    let stft_cfg = cfg.features.stft()?;
    let stft = Stft::new(stft_cfg)?;
    let (mut jump, mut s, mut base, mut n) = (0.0, 0.0, 0.0, 0usize);
    for cm in mixtures {
        let m = active_speakers(&cm.mixture);
        let spec = stft.forward(&m.mix);
        let feats = log_magnitude_features(&spec);
        let emb = m
            .speaker_ids()
            .iter()
            .map(|spk| Ok(sample_embedding(&m, spk, &SamplingStrategy::new(StrategyKind::V1), encoder, 0)?.embedding))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let (masks, y_hat) = separate(params, &stft, &feats, &emb, &spec)?;
        let mag = spec.magnitude();
        let mut est = masks.clone();
        for mut k in est.outer_iter_mut() {
            k.zip_mut_with(&mag, |e, &x| *e *= x);
        }
        let sr = m.sample_rate() as f64;
        let mut frames: Vec<usize> = m
            .labels
            .iter()
            .flat_map(|l| [l.start_s, l.end_s])
            .map(|t| ((t * sr / stft_cfg.hop as f64).round() as usize).saturating_sub(1))
            .collect();
        frames.sort_unstable();
        frames.dedup();
        jump += boundary_discontinuity(&est, &frames);
        for (k, src) in m.sources.iter().enumerate() {
            let y = Waveform::new(y_hat.row(k).to_vec(), m.sample_rate())?;
            s += sdr(&src.audio, &y)?;
            base += sdr(&src.audio, &m.mix)?;
            n += 1;
        }
    }
    let count = mixtures.len().max(1) as f64;
    Ok(SeparationQuality {
        boundary_jump: jump / count,
        sdr_db: s / n.max(1) as f64,
        mixture_sdr_db: base / n.max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: EmbeddingVariant,
    /// Mean cosine similarity to the oracle embedding of the same speaker.
    pub mean_cosine_to_oracle: f64,
    /// Mean cosine similarity to the oracle embeddings of the other speakers.
    pub mean_cosine_to_others: Option<f64>,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityRow {
    pub id: String,
    pub windows: usize,
    pub kept: usize,
    pub purity_all: f64,
    pub purity_filtered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedStudy {
    pub variants: Vec<VariantStats>,
    pub purity: Vec<PurityRow>,
    pub mean_purity_all: f64,
    pub mean_purity_filtered: f64,
}

/// Window clustering purity with and without the oracle overlap filter.
/// Windows are labelled by their dominant reference speaker; clustering uses
/// the true speaker count. Returns `None` when either variant has fewer than
/// two usable windows.
pub fn purity_row(cm: &CorpusMixture, encoder: &dyn SpeakerEncoder, seed: u64) -> anyhow::Result<Option<PurityRow>> {
    let m = &cm.mixture;
    let reference = DiarAnnotation::from_labels(&m.labels);
    let k = reference.speakers().len();
    let windows = extract_windows(&m.mix, WINDOW_S);
    let kept = overlap_filter(&windows, &OracleOverlapDetector::new(reference.clone()));
    let score = |ws: &[tssep_core::cluster::Window]| -> anyhow::Result<Option<f64>> {
        let mut names = Vec::new();
        let mut es = Vec::new();
        for w in ws {
            let Some(spk) = dominant_speaker(&reference, w) else { continue };
            match encoder.encode(&m.mix.slice_s(w.start_s, w.end_s)) {
                Ok(e) => {
                    names.push(spk);
                    es.push(e);
                }
                Err(tssep_core::Error::NoVoicedFrames) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if es.len() < 2.max(k) {
            return Ok(None);
        }
        let mut ids = names.clone();
        ids.sort();
        ids.dedup();
        let truth: Vec<usize> = names.iter().map(|n| ids.binary_search(n).expect("present")).collect();
        let a = spectral_cluster(&es, Some(k), seed)?;
        Ok(Some(purity(&a.labels, &truth)))
    };
    Ok(match (score(&windows)?, score(&kept)?) {
        (Some(all), Some(filtered)) => Some(PurityRow {
            id: cm.id.clone(),
            windows: windows.len(),
            kept: kept.len(),
            purity_all: all,
            purity_filtered: filtered,
        }),
        _ => None,
    })
}

/// V1-V4 similarity statistics and the overlap-filter purity comparison.
pub fn embed_study(mixtures: &[CorpusMixture], encoder: &dyn SpeakerEncoder, seed: u64) -> anyhow::Result<EmbedStudy> {
    let mut sums: BTreeMap<EmbeddingVariant, (f64, usize, f64, usize, usize)> = BTreeMap::new();
    let mut rows = Vec::new();
    for (i, cm) in mixtures.iter().enumerate() {
        let m = active_speakers(&cm.mixture);
        let ids: Vec<String> = m.speaker_ids().iter().map(|s| s.to_string()).collect();
        let mix_seed = rng::derive_seed(seed, &[0x57, i as u64]);
        let oracle = ids
            .iter()
            .map(|s| Ok(sample_embedding(&m, s, &SamplingStrategy::new(StrategyKind::V1), encoder, mix_seed)?.embedding))
            .collect::<anyhow::Result<Vec<_>>>()?;
        for v in EmbeddingVariant::ALL {
            let kind = match v {
                EmbeddingVariant::V1 => StrategyKind::V1,
                EmbeddingVariant::V2 => StrategyKind::V2,
                EmbeddingVariant::V3 => StrategyKind::V3,
                EmbeddingVariant::V4 => StrategyKind::V4,
            };
            for (k, s) in ids.iter().enumerate() {
                let e = sample_embedding(&m, s, &SamplingStrategy::new(kind), encoder, mix_seed)?;
                let entry = sums.entry(v).or_default();
                entry.0 += e.embedding.cosine(&oracle[k]);
                entry.1 += 1;
                for (_, o) in oracle.iter().enumerate().filter(|(j, _)| *j != k) {
                    entry.2 += e.embedding.cosine(o);
                    entry.3 += 1;
                }
                entry.4 += usize::from(e.fell_back);
            }
        }
        if let Some(row) = purity_row(cm, encoder, mix_seed)? {
            rows.push(row);
        }
    }
    let n = rows.len().max(1) as f64;
    Ok(EmbedStudy {
        variants: sums
            .into_iter()
            .map(|(variant, (c, n, o, no, fb))| VariantStats {
                variant,
                mean_cosine_to_oracle: c / n.max(1) as f64,
                mean_cosine_to_others: (no > 0).then(|| o / no as f64),
                fallbacks: fb,
            })
            .collect(),
        mean_purity_all: rows.iter().map(|r| r.purity_all).sum::<f64>() / n,
        mean_purity_filtered: rows.iter().map(|r| r.purity_filtered).sum::<f64>() / n,
        purity: rows,
    })
}
