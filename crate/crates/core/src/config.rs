//! Run configuration, presets and config hashing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::GenConfig;
use crate::error::{Error, Result};
use crate::rng::named_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionStrategy {
    /// `y_I = Z(LN(y_ct)) + y_0`
    #[serde(rename = "adaln", alias = "adaln_default")]
    Adaln,
    /// Static and projected conditioned tokens interleaved (2·N_I tokens).
    #[serde(rename = "mof", alias = "mof_interleave")]
    Mof,
    /// `y_I = y_0 + ZeroProj(CrossAttn(y_0, y_ct))`
    #[serde(rename = "cross", alias = "cross_attention")]
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Two-layer GELU projection with a zero-initialised output layer in
    /// place of the linear `Z`.
    pub zero_ffn: bool,
    pub zero_ffn_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Adaln,
            zero_ffn: false,
            zero_ffn_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_vis: usize,
    pub vis_layers: usize,
    pub vis_heads: usize,
    pub d_text: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub eps: f64,
    pub fusion: FusionConfig,
    /// Instruction-conditioned layer norms in the dynamic branch. Off means
    /// the dynamic branch runs the plain backbone.
    pub adaln: bool,
    /// Also modulate the backbone's final layer norm.
    pub modulate_final_norm: bool,
    /// Compute the dynamic branch at all; off gives the static baseline
    /// `y_I = y_0`.
    pub dynamic_branch: bool,
    /// Feed `y_0` into the fusion; off replaces it by zeros.
    pub static_branch: bool,
    /// Train the text encoder body in stage 2.
    pub train_text_in_stage2: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch: 4,
            d_vis: 32,
            vis_layers: 4,
            vis_heads: 4,
            d_text: 32,
            text_layers: 2,
            text_heads: 4,
            max_len: 77,
            mlp_ratio: 4,
            head_hidden: 64,
            eps: 1e-5,
            fusion: FusionConfig::default(),
            adaln: true,
            modulate_final_norm: false,
            dynamic_branch: true,
            static_branch: true,
            train_text_in_stage2: false,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Parameter(msg.to_string()))
            }
        };
        check(self.patch > 0 && self.image_size % self.patch == 0, "image_size must be a multiple of patch")?;
        check(self.d_vis > 0 && self.d_vis % self.vis_heads.max(1) == 0, "d_vis must be divisible by vis_heads")?;
        check(self.d_text > 0 && self.d_text % self.text_heads.max(1) == 0, "d_text must be divisible by text_heads")?;
        check(self.vis_heads > 0 && self.text_heads > 0, "heads must be positive")?;
        check(self.max_len >= 2, "max_len must be at least 2")?;
        check(self.eps > 0.0, "eps must be positive")?;
        check(self.channels > 0 && self.mlp_ratio > 0 && self.head_hidden > 0, "sizes must be positive")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage > 2 {
            return Err(Error::Parameter(format!("unknown stage {}", self.stage)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Parameter(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Parameter(format!("peak lr {} must be > 0", self.peak_lr)));
        }
        if self.total_steps < 1 {
            return Err(Error::Parameter("total_steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Parameter("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Scaled for toy networks.
    Toy,
    /// Batch sizes, learning rates, warmup and decay of the reference recipe.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub pretrain: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl TrainingConfig {
    pub fn preset(p: Preset) -> Self {
        let stage = |stage, batch_size, peak_lr, total_steps| StageConfig {
            stage,
            batch_size,
            peak_lr,
            warmup_ratio: 0.03,
            total_steps,
            weight_decay: 0.0,
            seed: 0,
        };
        match p {
            Preset::Toy => Self {
                pretrain: stage(0, 32, 3e-3, 400),
                stage1: stage(1, 32, 3e-3, 500),
                stage2: stage(2, 32, 1e-3, 200),
            },
            Preset::Paper => Self {
                pretrain: stage(0, 256, 6e-4, 400),
                stage1: stage(1, 256, 6e-4, 500),
                stage2: stage(2, 128, 2e-5, 200),
            },
        }
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig> {
        match stage {
            0 => Ok(&self.pretrain),
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            s => Err(Error::Parameter(format!("unknown stage {s}"))),
        }
    }

    pub fn stage_mut(&mut self, stage: u8) -> Result<&mut StageConfig> {
        match stage {
            0 => Ok(&mut self.pretrain),
            1 => Ok(&mut self.stage1),
            2 => Ok(&mut self.stage2),
            s => Err(Error::Parameter(format!("unknown stage {s}"))),
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub dataset: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            dataset: GenConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.scene.validate()?;
        for s in 0..=2 {
            let st = self.training.stage(s)?;
            st.validate()?;
            if st.stage != s {
                return Err(Error::Parameter(format!(
                    "stage config slot {s} carries stage id {}",
                    st.stage
                )));
            }
        }
        if self.dataset.scene.image_size != self.model.image_size {
            return Err(Error::Parameter(format!(
                "dataset image size {} differs from model image size {}",
                self.dataset.scene.image_size, self.model.image_size
            )));
        }
        Ok(())
    }

    /// Point every stream at `seed`: the run and dataset seed itself, every
    /// stage its `train` substream.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        let s = named_seed(seed, "train");
        for st in [&mut self.training.pretrain, &mut self.training.stage1, &mut self.training.stage2] {
            st.seed = s;
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of SHA-256 over the compact JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialises");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
