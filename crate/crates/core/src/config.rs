//! Model and training configuration, with presets and the versioned JSON
//! schema the CLI reads.

use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Architectural and loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Image height, width, channels; patch side length.
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    /// Encoder and decoder widths.
    pub d1: usize,
    pub d2: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    /// Character sequence length and prediction class count.
    pub l: usize,
    pub m: usize,
    pub patch_mask_ratio: f64,
    pub text_mask_ratio_explicit: f64,
    pub text_mask_ratio_implicit: f64,
    /// Loss weights: alpha/beta on the two reconstruction terms,
    /// gamma/epsilon on the two text terms.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Correction iterations.
    pub k_iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: 32×128 grayscale, 4×4 patches — the same
    /// 8×32 = 256 token grid as the full-scale geometry at ~150× less
    /// compute.
    pub fn toy() -> Self {
        ModelConfig {
            h: 32,
            w: 128,
            c: 1,
            p: 4,
            d1: 128,
            d2: 64,
            enc_depth: 4,
            enc_heads: 4,
            dec_depth: 2,
            dec_heads: 4,
            l: 12,
            m: 37,
            patch_mask_ratio: 0.75,
            text_mask_ratio_explicit: 0.2,
            text_mask_ratio_implicit: 1.0,
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.01,
            epsilon: 0.01,
            k_iterations: 3,
        }
    }

    /// Tiny config for finite-difference gradient checking.
    pub fn micro() -> Self {
        ModelConfig {
            h: 8,
            w: 16,
            c: 1,
            p: 4,
            d1: 16,
            d2: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_depth: 1,
            dec_heads: 2,
            l: 4,
            m: 6,
            ..ModelConfig::toy()
        }
    }

    /// The full-scale preset (documented, not runnable at desk scale):
    /// 112×448 RGB, 14×14 patches, ViT-B encoder, light decoder, L=27.
    pub fn paper_scale() -> Self {
        ModelConfig {
            h: 112,
            w: 448,
            c: 3,
            p: 14,
            d1: 768,
            d2: 512,
            enc_depth: 12,
            enc_heads: 12,
            dec_depth: 4,
            dec_heads: 8,
            l: 27,
            m: 37,
            ..ModelConfig::toy()
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    pub fn patch_len(&self) -> usize {
        self.p * self.p * self.c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.p == 0 || self.h % self.p != 0 || self.w % self.p != 0 {
            return fail(format!(
                "patch size {} must divide image {}x{}",
                self.p, self.h, self.w
            ));
        }
        if self.c != 1 && self.c != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.c));
        }
        if self.d1 == 0 || self.d1 % self.enc_heads != 0 {
            return fail(format!(
                "encoder width {} must be divisible by {} heads",
                self.d1, self.enc_heads
            ));
        }
        if self.d2 == 0 || self.d2 % self.dec_heads != 0 {
            return fail(format!(
                "decoder width {} must be divisible by {} heads",
                self.d2, self.dec_heads
            ));
        }
        if self.l < 2 {
            return fail(format!("sequence length L must be at least 2, got {}", self.l));
        }
        if self.m < 2 {
            return fail(format!("class count M must be at least 2, got {}", self.m));
        }
        for (name, r) in [
            ("patch_mask_ratio", self.patch_mask_ratio),
            ("text_mask_ratio_explicit", self.text_mask_ratio_explicit),
            ("text_mask_ratio_implicit", self.text_mask_ratio_implicit),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return fail(format!("{name} {r} out of [0,1]"));
            }
        }
        Ok(())
    }

    /// Short fingerprint of the architecture, reported by eval.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Which normalization the fine-tuning objective uses for the iteration
/// sum: the printed form divides by `2(K−1)`, the averaged variant by `2K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Paper,
    Averaged,
}

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Everything one training stage needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub warmup_steps: u64,
    /// Labeled / unlabeled samples per step (N1 / N2).
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: Option<f64>,
    pub layer_decay: Option<f64>,
    pub seed: u64,
    pub log_every: u64,
    pub ckpt_every: u64,
    pub augment: bool,
    pub k_iterations: usize,
    pub enable_v1: bool,
    pub enable_t1: bool,
    pub enable_v2: bool,
    pub enable_t2: bool,
    pub enable_iter: bool,
    pub finetune_loss_variant: LossVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain_default()
    }
}

impl TrainConfig {
    /// Toy pretraining stage: no grad clip, β₂ = 0.95, crop augmentation.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 1000,
            warmup_steps: 100,
            batch_labeled: 8,
            batch_unlabeled: 0,
            base_lr: 1.5e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: None,
            layer_decay: None,
            seed: 0,
            log_every: 10,
            ckpt_every: 0,
            augment: true,
            k_iterations: 3,
            enable_v1: true,
            enable_t1: true,
            enable_v2: true,
            enable_t2: true,
            enable_iter: true,
            finetune_loss_variant: LossVariant::Paper,
        }
    }

    /// Toy fine-tuning stage: grad clip 2.0, β₂ = 0.999, layer-wise decay
    /// 0.75, iterative correction on.
    pub fn finetune_default() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            steps: 500,
            warmup_steps: 100,
            batch_labeled: 8,
            batch_unlabeled: 0,
            base_lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: Some(2.0),
            layer_decay: Some(0.75),
            augment: false,
            ..TrainConfig::pretrain_default()
        }
    }

    pub fn schedule(&self) -> crate::optim::LrSchedule {
        crate::optim::LrSchedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            grad_clip: self.grad_clip,
            layer_decay: self.layer_decay,
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_labeled == 0 && matches!(stage, Stage::Finetune) {
            return Err(Error::Config("fine-tuning needs labeled samples".into()));
        }
        let k = self.effective_k();
        if matches!(stage, Stage::Finetune)
            && k == 1
            && self.finetune_loss_variant == LossVariant::Paper
        {
            return Err(Error::Config(
                "K=1 is rejected: the iteration-sum weight 1/(2(K-1)) divides by zero; \
                 use K=0, K>=2, or the averaged loss variant"
                    .into(),
            ));
        }
        Ok(())
    }

    /// K actually used in fine-tuning: 0 when iteration is toggled off.
    pub fn effective_k(&self) -> usize {
        if self.enable_iter {
            self.k_iterations
        } else {
            0
        }
    }
}

/// Defaults for `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub word_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 256,
            seed: 0,
            word_len_min: 3,
            word_len_max: 10,
            word_offset: 0,
        }
    }
}

/// The versioned top-level config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub data: DataConfig,
}

pub const SCHEMA_VERSION: u32 = 1;

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::toy(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            data: DataConfig::default(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} unsupported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
