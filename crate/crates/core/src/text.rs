//! Learnable class prompts and the frozen text encoder.
//!
//! Each class `c` owns `J` learnable token embeddings `X[c]`; every prompt ends
//! with the same frozen word embedding of the supercategory name. The encoder
//! is a small pre-norm transformer whose output at the last position, after a
//! final norm and projection, is the class embedding `T^c`.

use std::collections::BTreeMap;

use mpfgvc_tensor::{init, Graph, ParamId, ParamStore, Scalar, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{TemplateMode, TextConfig};
use crate::error::{config, Result};
use crate::nn::{fan_in_std, LayerNorm, TransformerBlock, INIT_STD};

pub const PHOTO_PREFIX: [&str; 3] = ["a", "photo", "of"];

/// Std of word and learnable-token embeddings.
pub const TOKEN_STD: f64 = 1.0;

fn word_seed(seed: u64, word: &str) -> u64 {
    // FNV-1a, so a word's embedding depends only on the word and the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub dim: usize,
    pub words: BTreeMap<String, ParamId>,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub projection: ParamId,
    pub max_len: usize,
}

impl TextEncoder {
    /// Builds the encoder with a frozen embedding for each word in `vocab`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &TextConfig,
        dim: usize,
        vocab: &[String],
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut words = BTreeMap::new();
        for w in vocab {
            if words.contains_key(w) {
                continue;
            }
            let mut wrng = ChaCha8Rng::seed_from_u64(word_seed(seed, w));
            let id = store.add(
                format!("text_encoder.token_embedding.{w}"),
                init::normal(&mut wrng, &[dim], TOKEN_STD),
            )?;
            words.insert(w.clone(), id);
        }
        let max_len = PHOTO_PREFIX.len() + cfg.prompt_tokens.max(2) + 1;
        let pos_embed = store.add("text_encoder.pos_embed", init::trunc_normal(rng, &[max_len, dim], INIT_STD))?;
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("text_encoder.layer{}", i + 1), dim, cfg.heads, 4, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(store, "text_encoder.ln_final", dim)?;
        let projection = store.add("text_encoder.projection", init::trunc_normal(rng, &[dim, dim], fan_in_std(dim)))?;
        Ok(Self {
            dim,
            words,
            pos_embed,
            blocks,
            ln_final,
            projection,
            max_len,
        })
    }

    pub fn word(&self, w: &str) -> Result<ParamId> {
        self.words
            .get(w)
            .copied()
            .ok_or_else(|| config(format!("word {w:?} missing from the token embedding table")))
    }

    /// Encodes `[C, T, D]` prompt embeddings into `[C, D]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, prompts: Var) -> Result<Var> {
        let (c, t) = (g.shape(prompts)[0], g.shape(prompts)[1]);
        if t > self.max_len {
            return Err(config(format!("prompt length {t} exceeds {}", self.max_len)));
        }
        let pos = g.param(store, self.pos_embed);
        let pos = g.narrow(pos, 0, 0, t)?;
        let mut x = g.add(prompts, pos)?;
        for block in &self.blocks {
            x = block.forward(g, store, x)?.0;
        }
        let last = g.narrow(x, 1, t - 1, 1)?;
        let last = g.reshape(last, &[c, self.dim])?;
        let last = self.ln_final.forward(g, store, last)?;
        let proj = g.param(store, self.projection);
        Ok(g.matmul(last, proj)?)
    }
}

/// Per-class learnable tokens plus the words that complete each prompt.
#[derive(Clone, Debug)]
pub struct PromptBank {
    /// `[C, J, D]`; absent for the handcrafted template.
    pub x: Option<ParamId>,
    pub num_classes: usize,
    pub tokens: usize,
    pub template: TemplateMode,
    pub supercategory: String,
    pub class_names: Vec<String>,
}

impl PromptBank {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &TextConfig,
        dim: usize,
        supercategory: &str,
        class_names: &[String],
        rng: &mut R,
    ) -> Result<Self> {
        let c = class_names.len();
        let x = if cfg.template.has_learned_tokens() {
            Some(store.add("prompt.tokens", init::normal(rng, &[c, cfg.prompt_tokens, dim], TOKEN_STD))?)
        } else {
            None
        };
        Ok(Self {
            x,
            num_classes: c,
            tokens: cfg.prompt_tokens,
            template: cfg.template,
            supercategory: supercategory.to_string(),
            class_names: class_names.to_vec(),
        })
    }

    /// Every word the bank's prompts use, for building the embedding table.
    pub fn vocabulary(template: TemplateMode, supercategory: &str, class_names: &[String]) -> Vec<String> {
        let mut v: Vec<String> = PHOTO_PREFIX.iter().map(|s| s.to_string()).collect();
        v.push(supercategory.to_string());
        if matches!(template, TemplateMode::Handcrafted | TemplateMode::SubcategoryName) {
            v.extend(class_names.iter().cloned());
        }
        v
    }

    pub fn prompt_len(&self) -> usize {
        match self.template {
            TemplateMode::LearnedOnly => self.tokens + 1,
            TemplateMode::PrefixPhoto | TemplateMode::SubcategoryName => PHOTO_PREFIX.len() + self.tokens + 1,
            TemplateMode::Handcrafted => PHOTO_PREFIX.len() + 2,
        }
    }

    /// One frozen word embedding repeated for `c` prompts: `[c, 1, D]`.
    fn word_rows<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        te: &TextEncoder,
        word: &str,
        c: usize,
    ) -> Result<Var> {
        let w = g.param(store, te.word(word)?);
        let w = g.reshape(w, &[1, te.dim])?;
        Ok(g.broadcast_to(w, &[c, 1, te.dim])?)
    }

    /// Prompt embeddings for the classes in `classes`: `[len(classes), T, D]`.
    pub fn build<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        te: &TextEncoder,
        classes: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(mpfgvc_tensor::TensorError::Index {
                op: "build_prompt",
                index: bad,
                size: self.num_classes,
            }
            .into());
        }
        let c = classes.len();
        let mut parts = Vec::new();
        let with_prefix = matches!(
            self.template,
            TemplateMode::PrefixPhoto | TemplateMode::SubcategoryName | TemplateMode::Handcrafted
        );
        if with_prefix {
            for w in PHOTO_PREFIX {
                parts.push(Self::word_rows(g, store, te, w, c)?);
            }
        }
        if let Some(x) = self.x {
            let x = g.param(store, x);
            let rows: Vec<Vec<usize>> = vec![classes.to_vec()];
            let d = te.dim;
            let flat = g.reshape(x, &[1, self.num_classes, self.tokens * d])?;
            let picked = g.gather_rows(flat, &rows)?;
            parts.push(g.reshape(picked, &[c, self.tokens, d])?);
        } else {
            parts.push(Self::word_rows(g, store, te, "a", c)?);
        }
        match self.template {
            TemplateMode::LearnedOnly | TemplateMode::PrefixPhoto => {
                parts.push(Self::word_rows(g, store, te, &self.supercategory, c)?);
            }
            TemplateMode::SubcategoryName | TemplateMode::Handcrafted => {
                let names = classes
                    .iter()
                    .map(|&k| Self::word_rows(g, store, te, &self.class_names[k], 1))
                    .collect::<Result<Vec<_>>>()?;
                parts.push(g.concat(&names, 0)?);
            }
        }
        Ok(g.concat(&parts, 1)?)
    }

    /// The prompt of class `c` as `[T, D]`.
    pub fn build_prompt<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        te: &TextEncoder,
        c: usize,
    ) -> Result<Var> {
        let p = self.build(g, store, te, &[c])?;
        let (t, d) = (g.shape(p)[1], g.shape(p)[2]);
        Ok(g.reshape(p, &[t, d])?)
    }

    /// `E_T [C, D]`: every class prompt through the text encoder.
    pub fn encode_text<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, te: &TextEncoder) -> Result<Var> {
        let all: Vec<usize> = (0..self.num_classes).collect();
        let prompts = self.build(g, store, te, &all)?;
        te.encode(g, store, prompts)
    }
}
