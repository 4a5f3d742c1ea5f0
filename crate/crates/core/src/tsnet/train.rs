use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::objective::{sep_loss, sep_loss_and_grad, vad_loss_and_grad, SepTarget};
use super::{save_checkpoint, CheckpointMeta, HeadKind, TsNetParams};
use crate::embed::SpeakerEmbedding;
use crate::losses::{bce_vad, LossRecord, OslConfig};
use crate::signal::Stft;
use crate::{rng, Error, Result};

/// One training mixture. `embeddings[k]` lists the candidate embeddings of
/// speaker `k`; each visit draws one uniformly. Candidate 0 is used for
/// evaluation.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub features: Array2<f64>,
    pub embeddings: Vec<Vec<SpeakerEmbedding>>,
    /// `K x T` activity targets (VAD objective).
    pub vad_targets: Option<Array2<f64>>,
    pub sep: Option<SepTarget>,
}

impl TrainExample {
    fn pick(&self, draw: &mut impl FnMut(usize) -> usize, counts: &mut [usize]) -> Vec<SpeakerEmbedding> {
        self.embeddings
            .iter()
            .map(|cands| {
                let i = draw(cands.len());
                if let Some(c) = counts.get_mut(i) {
                    *c += 1;
                }
                cands[i].clone()
            })
            .collect()
    }

    fn eval_embeddings(&self) -> Vec<SpeakerEmbedding> {
        self.embeddings.iter().map(|c| c[0].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Objective {
    Vad,
    Sep { osl: OslConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    1
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            momentum: default_momentum(),
            clip_norm: Some(1.0),
            batch_size: default_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Reuse each (example, speaker) draw in every epoch.
    pub freeze_sampling: bool,
    /// One checkpoint per epoch is written here as `epoch-NNN.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TsNetParams,
    pub curve: Vec<LossRecord>,
    /// How often each candidate index was drawn.
    pub draw_counts: Vec<usize>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Mini-batch gradient descent with momentum. Deterministic given `cfg.seed`.
pub fn train(init: &TsNetParams, data: &[TrainExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.optimizer.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let stft = match (&cfg.objective, init.head_kind) {
        (Objective::Vad, HeadKind::Vad) => {
            if data.iter().any(|d| d.vad_targets.is_none()) {
                return Err(Error::Config("VAD training needs activity targets".into()));
            }
            None
        }
        (Objective::Sep { osl }, HeadKind::Mask) => {
            osl.validate()?;
            let first = data[0].sep.as_ref().ok_or(Error::Config("separation training needs targets".into()))?;
            if data.iter().any(|d| d.sep.as_ref().map(|s| s.mix.config) != Some(first.mix.config)) {
                return Err(Error::Config("all separation targets need the same STFT configuration".into()));
            }
            Some(Stft::new(first.mix.config)?)
        }
        _ => return Err(Error::Config("objective does not match the network head".into())),
    };
    let max_cands = data.iter().flat_map(|d| d.embeddings.iter().map(Vec::len)).max().unwrap_or(1);
    let mut draw_counts = vec![0; max_cands];
    let mut params = init.clone();
    let mut velocity = init.zeros_like();
    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    let opt = cfg.optimizer;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x0e, epoch as u64]));
        let mut sampler = rng::stream(cfg.seed, &[0x5a, epoch as u64]);
        for batch in order.chunks(opt.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut grad = params.zeros_like();
            let (mut total, mut parts) = (0.0, [0.0f64; 3]);
            for &i in batch {
                let ex = &data[i];
                let emb = if cfg.freeze_sampling {
                    let mut k = 0u64;
                    ex.pick(
                        &mut |n| {
                            k += 1;
                            rng::stream(cfg.seed, &[0xf2, i as u64, k]).gen_range(0..n)
                        },
                        &mut draw_counts,
                    )
                } else {
                    ex.pick(&mut |n| sampler.gen_range(0..n), &mut draw_counts)
                };
                let (loss, g) = match (&cfg.objective, &stft) {
                    (Objective::Sep { osl }, Some(stft)) => {
                        let target = ex.sep.as_ref().ok_or(Error::Config("missing separation target".into()))?;
                        let (l, g) = sep_loss_and_grad(&params, stft, &ex.features, &emb, target, osl)?;
                        parts[1] += l.l_sep;
                        parts[2] += l.osl;
                        (l.combined, g)
                    }
                    _ => {
                        let targets = ex.vad_targets.as_ref().expect("checked above");
                        let (l, g) = vad_loss_and_grad(&params, &ex.features, &emb, targets)?;
                        parts[0] += l;
                        (l, g)
                    }
                };
                if !loss.is_finite() || !g.is_finite() {
                    return Err(Error::NanLoss {
                        step,
                        detail: format!("example {i} gave loss {loss}"),
                    });
                }
                total += loss;
                grad.add_scaled(&g, 1.0);
            }
            let n = batch.len() as f64;
            grad.scale(1.0 / n);
            if let Some(clip) = opt.clip_norm {
                let norm = grad.l2_norm();
                if norm > clip {
                    grad.scale(clip / norm);
                }
            }
            velocity.scale(opt.momentum);
            velocity.add_scaled(&grad, 1.0);
            params.add_scaled(&velocity, -opt.learning_rate);
            let is_sep = matches!(cfg.objective, Objective::Sep { .. });
            curve.push(LossRecord {
                step,
                epoch,
                bce: (!is_sep).then_some(parts[0] / n),
                l_sep: is_sep.then_some(parts[1] / n),
                osl: is_sep.then_some(parts[2] / n),
                combined: total / n,
            });
            step += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("epoch-{epoch:03}.ckpt"));
            save_checkpoint(
                &path,
                &params,
                &CheckpointMeta {
                    seed: cfg.seed,
                    step,
                    stage: None,
                },
            )?;
            checkpoints.push(path);
        }
        tracing::debug!(epoch, step, loss = curve.last().map(|r| r.combined), "epoch done");
    }
    Ok(TrainOutcome {
        params,
        curve,
        draw_counts,
        steps: step,
        checkpoints,
    })
}

/// Mean loss over `data` using each speaker's first candidate embedding.
/// Returns the BCE for VAD and the plain `l_sep` for separation.
pub fn evaluate(params: &TsNetParams, data: &[TrainExample], objective: &Objective) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut total = 0.0;
    for ex in data {
        let emb = ex.eval_embeddings();
        total += match objective {
            Objective::Vad => {
                let targets = ex.vad_targets.as_ref().ok_or(Error::Config("missing VAD targets".into()))?;
                bce_vad(&params.forward_vad(&ex.features, &emb)?, targets)?
            }
            Objective::Sep { osl } => {
                let target = ex.sep.as_ref().ok_or(Error::Config("missing separation target".into()))?;
                let stft = Stft::new(target.mix.config)?;
                sep_loss(params, &stft, &ex.features, &emb, target, osl)?.l_sep
            }
        };
    }
    Ok(total / data.len() as f64)
}
