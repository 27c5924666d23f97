//! The full model: image encoder, stage-1 head, prompt bank, frozen text
//! encoder and fusion module, all sharing one parameter store.

use mpfgvc_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionMode, RunConfig, Selector, Variant};
use crate::error::{config, Result};
use crate::nn::Linear;
use crate::text::{PromptBank, TextEncoder};
use crate::vit::{Encoded, Selection, VitEncoder};
use crate::vlfm::{FusionVars, Vlfm};

pub const IMAGE_ENCODER: &str = "image_encoder.";
pub const TEXT_ENCODER: &str = "text_encoder.";
pub const PROMPT: &str = "prompt.";
pub const HEAD1: &str = "head1.";
pub const VLFM: &str = "vlfm.";
pub const GROUPS: [&str; 5] = [IMAGE_ENCODER, TEXT_ENCODER, PROMPT, HEAD1, VLFM];

/// Which parameter groups an optimisation phase may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Image encoder, prompt tokens and the stage-1 head.
    Stage1,
    /// Fusion module only.
    Stage2,
    /// Everything except the text encoder.
    OneStage,
    /// Nothing.
    Frozen,
}

impl Phase {
    pub fn trainable_groups(self) -> &'static [&'static str] {
        match self {
            Phase::Stage1 => &[IMAGE_ENCODER, PROMPT, HEAD1],
            Phase::Stage2 => &[VLFM],
            Phase::OneStage => &[IMAGE_ENCODER, PROMPT, HEAD1, VLFM],
            Phase::Frozen => &[],
        }
    }
}

/// Class list and supercategory needed to size the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub supercategory: String,
    pub class_names: Vec<String>,
}

impl Labels {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: RunConfig,
    pub labels: Labels,
    pub store: ParamStore<T>,
    pub vit: VitEncoder,
    pub head1: Linear,
    pub text: TextEncoder,
    pub bank: PromptBank,
    pub vlfm: Vlfm,
}

/// Tape handles from one batched forward pass.
pub struct Forward {
    pub encoded: Encoded,
    /// Stage-1 head logits `[B, C]`.
    pub logits1: Var,
    /// Class embeddings `[C, D]` when the variant uses the text prompt.
    pub et: Option<Var>,
    pub fusion: Option<FusionVars>,
}

impl<T: Scalar> Model<T> {
    /// Initializes every component from `cfg.train.seed`.
    pub fn new(cfg: &RunConfig, labels: Labels) -> Result<Self> {
        cfg.vit.validate()?;
        cfg.text.validate(cfg.vit.dim)?;
        cfg.variant.validate()?;
        let c = labels.num_classes();
        if c < 2 {
            return Err(config("need at least two classes"));
        }
        let seed = cfg.train.seed;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vit = VitEncoder::new(&mut store, &cfg.vit, &mut rng)?;
        let head1 = Linear::new(&mut store, "head1", cfg.vit.dim, c, true, &mut rng)?;
        let vocab = PromptBank::vocabulary(cfg.text.template, &labels.supercategory, &labels.class_names);
        // The text encoder stands in for a pretrained one: its weights depend on
        // a fixed seed, not on the run seed.
        let mut text_rng = ChaCha8Rng::seed_from_u64(TEXT_ENCODER_SEED);
        let text = TextEncoder::new(&mut store, &cfg.text, cfg.vit.dim, &vocab, TEXT_ENCODER_SEED, &mut text_rng)?;
        let bank = PromptBank::new(
            &mut store,
            &cfg.text,
            cfg.vit.dim,
            &labels.supercategory,
            &labels.class_names,
            &mut rng,
        )?;
        let vlfm = Vlfm::new(&mut store, cfg.vit.dim, c, &mut rng)?;
        let mut model = Self {
            cfg: cfg.clone(),
            labels,
            store,
            vit,
            head1,
            text,
            bank,
            vlfm,
        };
        model.set_phase(Phase::Frozen);
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn variant(&self) -> &Variant {
        &self.cfg.variant
    }

    /// Freezes everything, then unfreezes the groups `phase` trains. Prompt
    /// tokens stay frozen when the variant has no text prompt.
    pub fn set_phase(&mut self, phase: Phase) {
        self.store.freeze_all(true);
        for group in phase.trainable_groups() {
            if *group == PROMPT && !self.cfg.variant.datp {
                continue;
            }
            self.store.set_frozen(group, false);
        }
    }

    pub fn selection(&self) -> Selection {
        if self.cfg.variant.ssvp {
            Selection::Attention(self.cfg.variant.selector)
        } else {
            Selection::Disabled
        }
    }

    /// `E_T [C, D]` from the prompt bank.
    pub fn encode_text(&self, g: &mut Graph<T>) -> Result<Var> {
        self.bank.encode_text(g, &self.store, &self.text)
    }

    /// Image encoder and stage-1 head; with `text`, also the class embeddings;
    /// with `fusion`, the fusion module on top.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        images: &Tensor<T>,
        selection: &Selection,
        text: bool,
        fusion: Option<FusionMode>,
    ) -> Result<Forward> {
        let encoded = self.vit.encode(g, &self.store, images, selection)?;
        let logits1 = self.head1.forward(g, &self.store, encoded.ev)?;
        let et = if text || matches!(fusion, Some(FusionMode::Vlfm)) {
            Some(self.encode_text(g)?)
        } else {
            None
        };
        let fusion = match fusion {
            Some(mode) if mode.trains_fusion() => {
                let et_var = match et {
                    Some(v) => v,
                    None => g.constant(Tensor::zeros(&[0, self.cfg.vit.dim])),
                };
                Some(self.vlfm.forward(g, &self.store, encoded.ev, et_var, mode)?)
            }
            _ => None,
        };
        Ok(Forward {
            encoded,
            logits1,
            et,
            fusion,
        })
    }

    /// Values of every parameter in `group`, for freeze-contract checks.
    pub fn snapshot(&self, group: &str) -> Vec<(String, Vec<T>)> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(group))
            .map(|(_, p)| (p.name.clone(), p.tensor.data().to_vec()))
            .collect()
    }

    /// Same architecture at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            labels: self.labels.clone(),
            store: self.store.cast(),
            vit: self.vit.clone(),
            head1: self.head1.clone(),
            text: self.text.clone(),
            bank: self.bank.clone(),
            vlfm: self.vlfm.clone(),
        }
    }
}

/// Seed of the frozen text encoder and word table.
pub const TEXT_ENCODER_SEED: u64 = 0x7e47;

impl Selector {
    pub fn label(self) -> &'static str {
        match self {
            Selector::Ssvp => "SsVP",
            Selector::PsmLike => "PSM-like (rollout)",
            Selector::MhvmLike => "MHVM-like (head voting)",
        }
    }
}
