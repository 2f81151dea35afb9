//! Run configuration, read from TOML. Every field has a default so a
//! config file only needs the values it changes.

use std::path::Path;

use gst_core::sequence::{MaskMode, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{GstError, Result};
use crate::nn::AdamWConfig;
use crate::tokenizer::TokenizerConfig;
use crate::transformer::{ModelConfig, SamplingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub resolution: usize,
    pub num_scenes: usize,
    pub views_per_scene: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { resolution: 32, num_scenes: 2000, views_per_scene: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub decay_at: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    /// Codewords unused for this many steps are re-seeded from features;
    /// 0 disables restarts.
    pub restart_every: u64,
    /// Restarts stop after this fraction of training so the final codebook
    /// settles.
    pub restart_until: f64,
    pub data_init: bool,
    pub log_every: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            lr_final: 1e-4,
            decay_at: 0.8,
            warmup_steps: 100,
            grad_clip: 1.0,
            restart_every: 100,
            restart_until: 0.8,
            data_init: true,
            log_every: 50,
            optimizer: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
        }
    }
}

/// Transformer shape; vocabulary, sequence length and grid are derived
/// from the tokenizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub rope_base: f64,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { num_layers: 8, model_dim: 256, num_heads: 8, rope_base: 10000.0, mlp_ratio: 4, dropout: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    JointOrdered,
    JointPacked,
    Alternating,
}

impl TrainMode {
    pub fn mask_mode(self) -> MaskMode {
        match self {
            TrainMode::JointOrdered => MaskMode::OrderedCausal,
            TrainMode::JointPacked => MaskMode::PackedJoint,
            TrainMode::Alternating => MaskMode::Alternating,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::JointOrdered => "JOINT_ORDERED",
            TrainMode::JointPacked => "JOINT_PACKED",
            TrainMode::Alternating => "ALTERNATING",
        }
    }
}

/// Weights over the four conditionals, in the order
/// `[p(c|o), p(i|c,o), p(i|o), p(c|i,o)]`.
pub type ConditionalWeights = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatePhase {
    /// Fraction of total steps after which `conditionals` replace the base
    /// weights.
    pub start_fraction: f64,
    pub conditionals: ConditionalWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub conditionals: ConditionalWeights,
    /// ALTERNATING only: probabilities of `[novel view, pose]` tasks.
    pub task_weights: [f64; 2],
    pub late_phase: Option<LatePhase>,
    pub lr: f64,
    pub lr_final: f64,
    /// Fraction of training after which the learning rate drops to
    /// `lr_final`.
    pub decay_at: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub grad_clip: f64,
    pub steps: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Supervise the task token too (off: it is chosen by the user).
    pub supervise_task_token: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::JointOrdered,
            conditionals: [0.25; 4],
            task_weights: [0.5, 0.5],
            late_phase: None,
            lr: 1e-4,
            lr_final: 1e-5,
            decay_at: 0.8,
            warmup_steps: 0,
            batch_size: 32,
            grad_accum: 1,
            grad_clip: 1.0,
            steps: 30_000,
            log_every: 50,
            checkpoint_every: 1000,
            supervise_task_token: false,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GstError::Config(m.into()));
        let check = |w: &[f64]| w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !check(&self.conditionals) {
            return bad("conditionals must be non-negative and sum to 1");
        }
        if !check(&self.task_weights) {
            return bad("task_weights must be non-negative and sum to 1");
        }
        if let Some(lp) = &self.late_phase {
            if !check(&lp.conditionals) || !(0.0..=1.0).contains(&lp.start_fraction) {
                return bad("late_phase needs a probability vector and a start fraction in [0, 1]");
            }
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.log_every == 0 {
            return bad("batch_size, grad_accum and log_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    /// Conditional weights in force at `step`.
    pub fn conditionals_at(&self, step: u64) -> ConditionalWeights {
        match &self.late_phase {
            Some(lp) if step as f64 >= lp.start_fraction * self.steps as f64 => lp.conditionals,
            _ => self.conditionals,
        }
    }
}

/// Step-drop schedule with optional linear warmup.
pub fn learning_rate(step: u64, total: u64, lr: f64, lr_final: f64, decay_at: f64, warmup: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    if (step as f64) < decay_at * total as f64 {
        lr
    } else {
        lr_final
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub image: SamplingParams,
    pub camera: SamplingParams,
    pub constrained: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            image: SamplingParams { temperature: 1.0, top_k: 64 },
            camera: SamplingParams { temperature: 0.7, top_k: 32 },
            constrained: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test pairs per suite (0 = all).
    pub max_pairs: usize,
    pub baseline_draws: usize,
    pub prior_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_pairs: 200, baseline_draws: 20_000, prior_samples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub image_tokenizer: TokenizerConfig,
    pub camera_tokenizer: TokenizerConfig,
    pub image_tokenizer_train: TokenizerTrainConfig,
    pub camera_tokenizer_train: TokenizerTrainConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::reference()
    }
}

impl Config {
    /// Desk-scale reference run: 32×32 views, 8×8 token grids.
    pub fn reference() -> Self {
        let r = 32;
        Self {
            seed: 0,
            data: DataConfig { resolution: r, ..DataConfig::default() },
            image_tokenizer: TokenizerConfig::image(r, r),
            camera_tokenizer: TokenizerConfig::camera(r, r),
            image_tokenizer_train: TokenizerTrainConfig::default(),
            camera_tokenizer_train: TokenizerTrainConfig { batch_size: 32, ..TokenizerTrainConfig::default() },
            model: ModelShape::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// CI profile: 16×16 views, 4×4 token grids, a small transformer.
    pub fn fast() -> Self {
        let r = 16;
        let mut c = Self::reference();
        c.data = DataConfig { resolution: r, num_scenes: 400, views_per_scene: 6 };
        c.image_tokenizer = TokenizerConfig { codebook_size: 512, ..TokenizerConfig::image(r, r) };
        c.camera_tokenizer = TokenizerConfig { codebook_size: 256, ..TokenizerConfig::camera(r, r) };
        c.image_tokenizer_train.steps = 2000;
        c.image_tokenizer_train.batch_size = 32;
        c.camera_tokenizer_train.steps = 1500;
        c.model = ModelShape { num_layers: 4, model_dim: 128, num_heads: 4, ..ModelShape::default() };
        c.train = TrainConfig {
            lr: 1e-3,
            lr_final: 1e-4,
            warmup_steps: 100,
            batch_size: 16,
            steps: 3000,
            checkpoint_every: 500,
            ..TrainConfig::default()
        };
        c.eval = EvalConfig { max_pairs: 100, baseline_draws: 20_000, prior_samples: 200 };
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| GstError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.image_tokenizer.validate()?;
        self.camera_tokenizer.validate()?;
        if self.image_tokenizer.grid() != self.camera_tokenizer.grid() {
            return Err(GstError::Config("image and camera token grids must have the same shape".into()));
        }
        for t in [&self.image_tokenizer, &self.camera_tokenizer] {
            if (t.height, t.width) != (self.data.resolution, self.data.resolution) {
                return Err(GstError::Config("tokenizer resolution must equal data.resolution".into()));
            }
        }
        self.train.validate()?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.image_tokenizer.codebook_size as u32, self.camera_tokenizer.codebook_size as u32)
    }

    pub fn model_config(&self) -> ModelConfig {
        let (h, w) = self.image_tokenizer.grid();
        let l = h * w;
        ModelConfig {
            num_layers: self.model.num_layers,
            model_dim: self.model.model_dim,
            num_heads: self.model.num_heads,
            vocab_size: self.vocabulary().size() as usize,
            max_seq_len: MaskMode::PackedJoint.sequence_len(l),
            rope_base: self.model.rope_base,
            dropout: self.model.dropout,
            mlp_ratio: self.model.mlp_ratio,
            grid_height: h,
            grid_width: w,
        }
    }
}
