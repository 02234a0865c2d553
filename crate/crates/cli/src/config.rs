//! TOML run configuration. Every key has a default; unknown keys are errors.

use flexvar_core::inference::SamplerConfig;
use flexvar_core::model::ArConfig;
use flexvar_core::pyramid::PredictionMode;
use flexvar_core::tokenizer::TokenizerConfig;
use flexvar_core::training::{AdamWConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train_tokenizer: TrainSection,
    pub train_ar: TrainSection,
    pub sampler: SamplerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            train_tokenizer: TrainSection::from(&TrainConfig::tokenizer_default()),
            train_ar: TrainSection::from(&TrainConfig::ar_default()),
            sampler: SamplerSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }
}

/// Synthetic training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub images: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { images: 32, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub patch: usize,
    pub channels: usize,
    pub codebook_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub beta: f64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let c = TokenizerConfig::default();
        Self {
            patch: c.patch,
            channels: c.channels,
            codebook_size: c.codebook_size,
            hidden: c.hidden,
            blocks: c.blocks,
            mlp_ratio: c.mlp_ratio,
            beta: c.beta,
        }
    }
}

impl TokenizerSection {
    pub fn build(&self) -> TokenizerConfig {
        TokenizerConfig {
            patch: self.patch,
            channels: self.channels,
            codebook_size: self.codebook_size,
            hidden: self.hidden,
            blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub classes: usize,
    /// `"gt"` or `"residual"`.
    pub mode: String,
    pub pe_extent: [usize; 2],
    pub mlp_ratio: usize,
    pub learn_pe: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ArConfig::default();
        Self {
            depth: c.depth,
            dim: c.dim,
            heads: c.heads,
            classes: c.classes,
            mode: c.mode.as_str().to_string(),
            pe_extent: [c.pe_extent.0, c.pe_extent.1],
            mlp_ratio: c.mlp_ratio,
            learn_pe: c.learn_pe,
        }
    }
}

impl ModelSection {
    /// Model config matching `tok`'s code width and vocabulary.
    pub fn build(&self, tok: &TokenizerConfig, mode: PredictionMode) -> ArConfig {
        ArConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            vocab: tok.codebook_size,
            classes: self.classes,
            mode,
            pe_extent: (self.pe_extent[0], self.pe_extent[1]),
            latent_channels: tok.channels,
            mlp_ratio: self.mlp_ratio,
            learn_pe: self.learn_pe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub pyramid_levels: usize,
    pub max_steps: usize,
    pub drop_p: f64,
    pub max_drops: usize,
    pub class_drop: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from(&TrainConfig::ar_default())
    }
}

impl From<&TrainConfig> for TrainSection {
    fn from(c: &TrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            iterations: c.iterations,
            lr: c.optim.lr,
            beta1: c.optim.beta1,
            beta2: c.optim.beta2,
            eps: c.optim.eps,
            weight_decay: c.optim.weight_decay,
            clip_norm: c.clip_norm,
            pyramid_levels: c.pyramid_levels,
            max_steps: c.max_steps,
            drop_p: c.drop_p,
            max_drops: c.max_drops,
            class_drop: c.class_drop,
        }
    }
}

impl TrainSection {
    pub fn build(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed,
            optim: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            clip_norm: self.clip_norm,
            pyramid_levels: self.pyramid_levels,
            max_steps: self.max_steps,
            drop_p: self.drop_p,
            max_drops: self.max_drops,
            class_drop: self.class_drop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub temperature: f64,
    /// 0 keeps every code.
    pub top_k: usize,
    pub guidance: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            temperature: s.temperature,
            top_k: s.top_k.unwrap_or(0),
            guidance: s.guidance,
        }
    }
}

impl SamplerSection {
    pub fn build(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: (self.top_k > 0).then_some(self.top_k),
            guidance: self.guidance,
            seed,
        }
    }
}
