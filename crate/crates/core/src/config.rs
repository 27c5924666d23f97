//! Run configuration. Every struct rejects unknown keys so that a typo in a
//! config file fails loudly instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config, IoContext, Result};

/// Image encoder geometry and token-selection settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_side: usize,
    /// Patch side in pixels.
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patch tokens kept by the vision prompt.
    pub k: usize,
    /// 1-based layer whose class-token attention drives selection; the
    /// reduced sequence feeds layer `ssvp_layer + 1`.
    pub ssvp_layer: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        let mut cfg = Self {
            image_side: 64,
            patch: 8,
            channels: 3,
            dim: 64,
            layers: 6,
            heads: 4,
            mlp_ratio: 4,
            k: 1,
            ssvp_layer: 5,
        };
        cfg.k = scaled_k(cfg.num_patches());
        cfg
    }
}

/// Keeps the 14-of-784 selection ratio used at 448px / patch 16.
pub fn scaled_k(num_patches: usize) -> usize {
    ((14.0 * num_patches as f64 / 784.0).round() as usize).max(1)
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_side / self.patch.max(1)
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch) {
            return Err(config(format!(
                "image side {} is not divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        if self.channels == 0 || self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(config("mlp_ratio must be positive"));
        }
        if self.layers < 2 {
            return Err(config("at least two layers are needed for token selection"));
        }
        let n = self.num_patches();
        if self.k == 0 || self.k > n {
            return Err(config(format!("k = {} outside [1, {n}]", self.k)));
        }
        if self.ssvp_layer == 0 || self.ssvp_layer >= self.layers {
            return Err(config(format!(
                "ssvp_layer = {} outside [1, {}]",
                self.ssvp_layer,
                self.layers - 1
            )));
        }
        Ok(())
    }
}

/// How each class prompt is assembled before the text encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateMode {
    /// `[X_1..X_J, super]`
    LearnedOnly,
    /// `["a", "photo", "of", X_1..X_J, super]`
    PrefixPhoto,
    /// `["a", "photo", "of", "a", name_c]`, nothing learnable
    Handcrafted,
    /// `["a", "photo", "of", X_1..X_J, name_c]`
    SubcategoryName,
}

impl TemplateMode {
    pub const ALL: [TemplateMode; 4] = [
        TemplateMode::Handcrafted,
        TemplateMode::SubcategoryName,
        TemplateMode::PrefixPhoto,
        TemplateMode::LearnedOnly,
    ];

    pub fn has_learned_tokens(self) -> bool {
        self != TemplateMode::Handcrafted
    }

    pub fn label(self) -> &'static str {
        match self {
            TemplateMode::LearnedOnly => "X1..XJ, super",
            TemplateMode::PrefixPhoto => "a photo of X1..XJ, super",
            TemplateMode::Handcrafted => "a photo of a name",
            TemplateMode::SubcategoryName => "a photo of X1..XJ, name",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Learnable tokens per class prompt (J).
    pub prompt_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub template: TemplateMode,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            prompt_tokens: 16,
            layers: 4,
            heads: 4,
            template: TemplateMode::LearnedOnly,
        }
    }
}

impl TextConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.template.has_learned_tokens() && self.prompt_tokens == 0 {
            return Err(config("prompt_tokens must be positive"));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(config(format!("text heads {} do not divide dim {dim}", self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    /// Epochs of linear learning-rate warmup at the start of each phase.
    pub warmup_epochs: usize,
    /// Random horizontal flips during stage 1.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_stage1: 0.03,
            lr_stage2: 0.1,
            epochs_stage1: 30,
            epochs_stage2: 10,
            batch_size: 8,
            seed: 0,
            tau: 0.07,
            warmup_epochs: 2,
            hflip: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule for CUB-200-2011 and NABirds-style runs.
    pub fn cub_448() -> Self {
        Self {
            lr_stage1: 3e-2,
            lr_stage2: 1e-3,
            epochs_stage1: 30,
            epochs_stage2: 10,
            batch_size: 32,
            warmup_epochs: 0,
            ..Self::default()
        }
    }

    /// Full-scale schedule for Stanford Dogs.
    pub fn dogs_448() -> Self {
        Self {
            lr_stage1: 3e-3,
            lr_stage2: 1e-4,
            ..Self::cub_448()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config("tau must be positive"));
        }
        if !(self.lr_stage1 >= 0.0 && self.lr_stage2 >= 0.0) {
            return Err(config("learning rates must be non-negative"));
        }
        Ok(())
    }
}

/// Which attention-driven selector builds the reduced final-layer sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    Ssvp,
    /// Attention rollout across layers (approximation of part selection).
    PsmLike,
    /// Per-head top-k voting (approximation of multi-head voting).
    MhvmLike,
}

/// What produces the final prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Stage-1 linear head on the visual embedding.
    None,
    /// Cross-modal attention over the visual and all textual embeddings.
    Vlfm,
    /// Same module with the textual rows removed.
    SelfAttentionOnly,
    /// `argmax_c cos(E_V, E_T^c)`; no stage 2.
    Similarity,
}

impl FusionMode {
    pub fn trains_fusion(self) -> bool {
        matches!(self, FusionMode::Vlfm | FusionMode::SelfAttentionOnly)
    }
}

/// Component switches of one model variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    pub ssvp: bool,
    pub selector: Selector,
    pub datp: bool,
    pub fusion: FusionMode,
}

impl Default for Variant {
    fn default() -> Self {
        Self::full()
    }
}

impl Variant {
    pub fn full() -> Self {
        Self {
            ssvp: true,
            selector: Selector::Ssvp,
            datp: true,
            fusion: FusionMode::Vlfm,
        }
    }

    pub fn baseline() -> Self {
        Self {
            ssvp: false,
            selector: Selector::Ssvp,
            datp: false,
            fusion: FusionMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion != FusionMode::None && !self.datp && self.fusion != FusionMode::SelfAttentionOnly {
            return Err(config("fusion over textual embeddings requires the text prompt (datp)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Synthetic dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    pub patch: usize,
    pub channels: usize,
    /// Patch cells stamped with the class pattern in each image.
    pub signal_patches: usize,
    /// Std of additive Gaussian pixel noise (pixel range is [0, 1]).
    pub noise: f64,
    /// Weight of the class-specific component of each pattern; the rest is
    /// shared by every class.
    pub class_contrast: f64,
    pub seed: u64,
    pub supercategory: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            train_per_class: 25,
            test_per_class: 10,
            image_side: 64,
            patch: 8,
            channels: 3,
            signal_patches: 4,
            noise: 0.05,
            class_contrast: 1.0,
            seed: 0,
            supercategory: "bird".to_string(),
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> usize {
        self.image_side / self.patch.max(1)
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_side.is_multiple_of(self.patch) {
            return Err(config("image side must be divisible by patch"));
        }
        if self.classes < 2 {
            return Err(config("need at least two classes"));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(config("channels must be 1 or 3"));
        }
        if self.signal_patches == 0 || self.signal_patches > self.num_patches() {
            return Err(config(format!(
                "signal_patches = {} outside [1, {}]",
                self.signal_patches,
                self.num_patches()
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(0.0..=1.0).contains(&self.class_contrast) {
            return Err(config("noise must be >= 0 and class_contrast in [0, 1]"));
        }
        Ok(())
    }
}

/// Everything one command needs. Loaded from JSON; CLI flags override fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub vit: VitConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub data: SynthConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            text: TextConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::full(),
            data: SynthConfig::default(),
            data_dir: None,
            out_dir: None,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.text.validate(self.vit.dim)?;
        self.train.validate()?;
        self.variant.validate()?;
        self.data.validate()?;
        Ok(())
    }

    /// A small geometry that trains in seconds; used by harness tests and
    /// multi-seed sweeps.
    pub fn quick() -> Self {
        let vit = VitConfig {
            image_side: 32,
            patch: 8,
            channels: 3,
            dim: 32,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            k: scaled_k(16),
            ssvp_layer: 3,
        };
        let data = SynthConfig {
            image_side: 32,
            patch: 8,
            signal_patches: 2,
            // Noisier pixels keep accuracies off the ceiling so ablation rows
            // can differ.
            noise: 0.45,
            ..SynthConfig::default()
        };
        Self {
            vit,
            text: TextConfig {
                prompt_tokens: 8,
                layers: 2,
                heads: 4,
                template: TemplateMode::LearnedOnly,
            },
            data,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.vit.num_patches(), 64);
        assert_eq!(cfg.vit.k, 1);
        assert_eq!(cfg.vit.ssvp_layer, cfg.vit.layers - 1);
        RunConfig::quick().validate().unwrap();
    }

    #[test]
    fn full_resolution_geometry() {
        let vit = VitConfig {
            image_side: 448,
            patch: 16,
            ..VitConfig::default()
        };
        assert_eq!(vit.num_patches(), 784);
        assert_eq!(scaled_k(784), 14);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_json(r#"{"vit": {"image_side": 32, "bogus": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"surprise": true}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"train": {"seed": 9}}"#).unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut vit = VitConfig {
            image_side: 30,
            ..VitConfig::default()
        };
        assert!(vit.validate().is_err());
        vit.image_side = 64;
        vit.k = 65;
        assert!(vit.validate().is_err());
        vit.k = 4;
        vit.ssvp_layer = vit.layers;
        assert!(vit.validate().is_err());
    }

    #[test]
    fn published_schedules() {
        let cub = TrainConfig::cub_448();
        assert_eq!((cub.lr_stage1, cub.lr_stage2), (3e-2, 1e-3));
        assert_eq!((cub.epochs_stage1, cub.epochs_stage2, cub.batch_size), (30, 10, 32));
        let dogs = TrainConfig::dogs_448();
        assert_eq!((dogs.lr_stage1, dogs.lr_stage2), (3e-3, 1e-4));
        assert_eq!(cub.tau, 0.07);
    }
}
