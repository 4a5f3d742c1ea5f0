//! Experiment configuration, read from a single TOML file. Every table
//! rejects unknown keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tssep_core::embed::{SamplingStrategy, StrategyKind, ToyEncoderConfig};
use tssep_core::losses::OslConfig;
use tssep_core::mixture::{SynthConfig, ToyCorpusConfig};
use tssep_core::pipeline::SegmentationConfig;
use tssep_core::signal::{StftConfig, WindowKind};
use tssep_core::tsnet::{HeadKind, Objective, OptimizerConfig, TsNetDims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_corpus")]
    pub corpus: ToyCorpusConfig,
    #[serde(default)]
    pub synth: CorpusPlan,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub encoder: ToyEncoderConfig,
    #[serde(default = "StagePlan::default_stage1")]
    pub stage1: StagePlan,
    #[serde(default = "StagePlan::default_stage2")]
    pub stage2: StagePlan,
    #[serde(default)]
    pub infer: InferConfig,
}

fn default_corpus() -> ToyCorpusConfig {
    ToyCorpusConfig {
        num_speakers: 6,
        utterances_per_speaker: 8,
        min_utt_s: 1.5,
        max_utt_s: 3.0,
        ..Default::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: default_corpus(),
            synth: CorpusPlan::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            encoder: ToyEncoderConfig::default(),
            stage1: StagePlan::default_stage1(),
            stage2: StagePlan::default_stage2(),
            infer: InferConfig::default(),
        }
    }
}

/// How many mixtures to draw and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPlan {
    pub num_train: usize,
    pub num_heldout: usize,
    pub mixture: SynthConfig,
    /// Cut each mixture to this length; whole mixtures are kept when absent.
    #[serde(default)]
    pub chunk_s: Option<f64>,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        Self {
            num_train: 16,
            num_heldout: 4,
            mixture: SynthConfig {
                num_speakers: 2,
                min_len_s: 6.0,
                ..Default::default()
            },
            chunk_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub window_len: usize,
    pub hop: usize,
    /// Ground-truth activity threshold relative to each source's level.
    pub activity_threshold_db: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_len: 256,
            hop: 128,
            activity_threshold_db: -40.0,
        }
    }
}

impl FeatureConfig {
    pub fn stft(&self) -> anyhow::Result<StftConfig> {
        Ok(StftConfig::new(self.window_len, self.hop, WindowKind::SqrtHann)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent: usize,
    pub max_speakers: usize,
    pub smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent: 24,
            max_speakers: 8,
            smoothing: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vad,
    Sep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossPlan {
    Bce,
    Sep {
        lambda: f64,
        #[serde(default = "default_p")]
        p: u32,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_p() -> u32 {
    OslConfig::default().p
}

fn default_epsilon() -> f64 {
    OslConfig::default().epsilon
}

/// One training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub sampling: SamplingStrategy,
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    /// Allows a separation stage to start from random weights.
    #[serde(default)]
    pub random_init: bool,
    pub loss: LossPlan,
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerConfig,
    /// Overrides the experiment seed for this stage.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub freeze_sampling: bool,
}

impl StagePlan {
    pub fn default_stage1() -> Self {
        Self {
            stage: Stage::Vad,
            sampling: SamplingStrategy::new(StrategyKind::UniformMix),
            init_from: None,
            random_init: false,
            loss: LossPlan::Bce,
            epochs: 12,
            max_steps: None,
            optimizer: OptimizerConfig::new(0.05),
            seed: None,
            freeze_sampling: false,
        }
    }

    pub fn default_stage2() -> Self {
        Self {
            stage: Stage::Sep,
            sampling: SamplingStrategy::new(StrategyKind::UniformMix),
            init_from: None,
            random_init: false,
            loss: LossPlan::Sep {
                lambda: OslConfig::default().lambda,
                p: default_p(),
                epsilon: default_epsilon(),
            },
            epochs: 8,
            max_steps: None,
            optimizer: OptimizerConfig::new(0.02),
            seed: None,
            freeze_sampling: false,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.sampling.validate()?;
        match (self.stage, self.loss) {
            (Stage::Vad, LossPlan::Bce) => {}
            (Stage::Sep, LossPlan::Sep { lambda, .. }) => {
                if !(0.0..=0.2).contains(&lambda) {
                    bail!("OSL weight lambda must lie in [0, 0.2], got {lambda}");
                }
                if self.init_from.is_none() && !self.random_init {
                    bail!("a sep stage needs init_from or random_init = true");
                }
            }
            (stage, loss) => bail!("loss {loss:?} does not fit stage {stage:?}"),
        }
        if self.epochs == 0 {
            bail!("epochs must be positive");
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            bail!("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        match self.loss {
            LossPlan::Bce => Objective::Vad,
            LossPlan::Sep { lambda, p, epsilon } => Objective::Sep {
                osl: OslConfig { p, epsilon, lambda },
            },
        }
    }

    pub fn head(&self) -> HeadKind {
        match self.stage {
            Stage::Vad => HeadKind::Vad,
            Stage::Sep => HeadKind::Mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub vad_threshold_db: f64,
    #[serde(default)]
    pub num_speakers: Option<usize>,
    pub mask_threshold: f64,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            vad_threshold_db: tssep_core::pipeline::DEFAULT_VAD_THRESHOLD_DB,
            num_speakers: None,
            mask_threshold: 0.5,
            segmentation: SegmentationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Checks everything that does not depend on files on disk. Stage plans
    /// are checked when they run, since `init_from` may come from the command line.
    pub fn validate(&self) -> anyhow::Result<()> {
        let m = &self.synth.mixture;
        if m.num_speakers == 0 || m.num_speakers > tssep_core::cluster::K_MAX {
            bail!("mixtures need 1..={} speakers, got {}", tssep_core::cluster::K_MAX, m.num_speakers);
        }
        if m.num_speakers > self.model.max_speakers {
            bail!("mixtures have more speakers than the model supports");
        }
        if !(0.0..=0.8).contains(&m.max_overlap) {
            bail!("max_overlap must lie in [0, 0.8], got {}", m.max_overlap);
        }
        self.features.stft()?;
        self.dims().validate()?;
        Ok(())
    }

    pub fn dims(&self) -> TsNetDims {
        TsNetDims {
            num_features: self.features.window_len / 2 + 1,
            embed_dim: self.encoder.num_mels,
            latent: self.model.latent,
            max_speakers: self.model.max_speakers,
            smoothing: self.model.smoothing,
        }
    }

    pub fn stage(&self, which: u8) -> anyhow::Result<&StagePlan> {
        match which {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            _ => bail!("stage must be 1 or 2, got {which}"),
        }
    }

    pub fn stage_seed(&self, plan: &StagePlan) -> u64 {
        plan.seed.unwrap_or(self.seed)
    }
}
