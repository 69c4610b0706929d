//! Declarative run configuration: network description, synthetic task,
//! optimizer and pruning hyperparameters. Loaded from a TOML file; a few
//! CLI flags may override individual values (flags win over file).

use crate::error::{DhpError, Result};
use crate::proxopt::{OptimConfig, Regularizer};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Plain conv chain with a pooled 1x1 classifier head.
    Chain,
    /// Residual stages; all second convs of a stage share one latent.
    Resnet,
    /// Dense blocks concatenating stage input and all previous growths.
    Dense,
    /// Pointwise + depthwise + pointwise blocks with residual adds.
    InvertedResidual,
    /// Conv chain ending in an upsampler conv + pixel shuffle.
    UpsamplerChain,
}

/// Backbone architecture description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetDescription {
    pub family: Family,
    /// Channel width per stage (chain: hidden widths of each conv).
    pub stage_widths: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Expansion factor for inverted-residual blocks.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    /// Growth rate for dense blocks.
    #[serde(default = "default_growth")]
    pub growth: usize,
    /// Upsampling factor r for the upsampler chain (output has r^2 * c channels).
    #[serde(default = "default_upscale")]
    pub upscale: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Classifier head width (classification families).
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Output image channels (regression families).
    #[serde(default = "default_input_channels")]
    pub output_channels: usize,
}

fn default_blocks() -> usize {
    2
}
fn default_kernel() -> usize {
    3
}
fn default_expansion() -> usize {
    6
}
fn default_growth() -> usize {
    8
}
fn default_upscale() -> usize {
    2
}
fn default_input_channels() -> usize {
    3
}
fn default_input_size() -> usize {
    16
}
fn default_classes() -> usize {
    10
}

impl NetDescription {
    /// Description with every optional field at its config-file default.
    pub fn new(family: Family, stage_widths: Vec<usize>) -> Self {
        Self {
            family,
            stage_widths,
            blocks_per_stage: default_blocks(),
            kernel: default_kernel(),
            expansion: default_expansion(),
            growth: default_growth(),
            upscale: default_upscale(),
            input_channels: default_input_channels(),
            input_size: default_input_size(),
            num_classes: default_classes(),
            output_channels: default_input_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(DhpError::InvalidConfig("stage_widths must be non-empty".into()));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(DhpError::InvalidConfig("stage widths must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(DhpError::InvalidConfig("kernel must be odd and positive".into()));
        }
        if self.blocks_per_stage == 0 || self.input_channels == 0 || self.input_size == 0 {
            return Err(DhpError::InvalidConfig("zero-size network dimension".into()));
        }
        match self.family {
            Family::Chain | Family::Resnet | Family::Dense | Family::InvertedResidual => {
                if self.num_classes < 2 {
                    return Err(DhpError::InvalidConfig("need at least 2 classes".into()));
                }
            }
            Family::UpsamplerChain => {
                if self.upscale < 2 {
                    return Err(DhpError::InvalidConfig("upscale must be >= 2".into()));
                }
                if self.output_channels == 0 {
                    return Err(DhpError::InvalidConfig("output_channels must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self.family, Family::UpsamplerChain)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Gaussian-cluster image classification.
    Clusters,
    /// Fixed linear-filter regression (3x3 blur of the, possibly upsampled, input).
    Filter,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default = "default_train")]
    pub train_samples: usize,
    #[serde(default = "default_val")]
    pub val_samples: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_train() -> usize {
    1024
}
fn default_val() -> usize {
    512
}
fn default_noise() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Sparsity regularization factor lambda.
    pub lambda: f64,
    #[serde(default = "default_regularizer")]
    pub regularizer: Regularizer,
}

fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_regularizer() -> Regularizer {
    Regularizer::L1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypernetSection {
    /// Embedding dimension m.
    #[serde(default = "default_m")]
    pub embedding_dim: usize,
}

fn default_m() -> usize {
    8
}

impl Default for HypernetSection {
    fn default() -> Self {
        HypernetSection {
            embedding_dim: default_m(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruneSection {
    pub target_flops_ratio: f64,
    /// Mask threshold tau.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_search_epochs")]
    pub search_epochs: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    /// Latent sharing across correlated layers; false switches to the
    /// per-layer-latents ablation with an l2,1 group regularizer.
    #[serde(default = "default_sharing")]
    pub sharing: bool,
}

fn default_tau() -> f64 {
    5e-3
}
fn default_search_epochs() -> usize {
    25
}
fn default_finetune_epochs() -> usize {
    20
}
fn default_sharing() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub out_dir: Option<String>,
    pub net: NetDescription,
    pub task: TaskConfig,
    pub optim: OptimSection,
    #[serde(default)]
    pub hypernet: HypernetSection,
    pub prune: PruneSection,
}

fn default_batch() -> usize {
    32
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| DhpError::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(0.0 < self.prune.target_flops_ratio && self.prune.target_flops_ratio < 1.0) {
            return Err(DhpError::InvalidConfig("target FLOPs ratio must be in (0, 1)".into()));
        }
        if self.prune.tau <= 0.0 {
            return Err(DhpError::InvalidConfig("tau must be positive".into()));
        }
        if self.optim.lr <= 0.0 {
            return Err(DhpError::InvalidConfig("lr must be positive".into()));
        }
        if self.optim.lambda < 0.0 {
            return Err(DhpError::InvalidConfig("lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(DhpError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.hypernet.embedding_dim == 0 {
            return Err(DhpError::InvalidConfig("embedding_dim must be positive".into()));
        }
        if self.batch_size == 0 || self.prune.search_epochs == 0 {
            return Err(DhpError::InvalidConfig("batch size and search epochs must be positive".into()));
        }
        if self.task.train_samples == 0 || self.task.val_samples == 0 {
            return Err(DhpError::InvalidConfig("sample counts must be positive".into()));
        }
        let classification = matches!(self.task.kind, TaskKind::Clusters);
        if classification != self.net.is_classification() {
            return Err(DhpError::InvalidConfig(
                "task kind does not match network family output".into(),
            ));
        }
        Ok(())
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            lr: self.optim.lr,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            sparsity: self.optim.lambda,
            regularizer: self.optim.regularizer,
        }
    }
}

/// CLI flag overrides; flags win over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub target: Option<f64>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = self.target {
            cfg.prune.target_flops_ratio = t;
        }
        if let Some(l) = self.lambda {
            cfg.optim.lambda = l;
        }
        if let Some(t) = self.tau {
            cfg.prune.tau = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
    }
}
