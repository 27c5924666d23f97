//! Image encoder: patch embedding, class token, position embedding and a
//! stack of pre-norm transformer layers. After `ssvp_layer` the sequence can be
//! cut down to the class token plus the `k` most attended patch tokens.

use mpfgvc_tensor::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::config::{Selector, VitConfig};
use crate::error::{config, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::ssvp::{self, SelectionResult};

/// Post-softmax attention of the class-token query over the `N` patch tokens,
/// one row per head (`[M, N]`). The class-to-class weight is dropped, so rows
/// need not sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub a: Tensor<f64>,
    /// 1-based index of the layer the record was captured at.
    pub layer_index: usize,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.a.shape()[1]
    }
}

/// A batch of embedded sequences `[B, n_tokens, D]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    /// Number of transformer layers already applied.
    pub layer_index: usize,
    pub includes_class: bool,
}

/// How the final-layer input is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    /// Full sequence through every layer.
    Disabled,
    Attention(Selector),
    /// Use these patch ids per image (gradient checks hold selection fixed).
    Forced(Vec<Vec<usize>>),
}

pub struct Encoded {
    /// Final class-token embedding `[B, D]`.
    pub ev: Var,
    /// Class-token attention at `ssvp_layer`, one per image.
    pub attention: Vec<AttentionRecord>,
    /// Retained patch ids per image; empty when selection is disabled.
    pub selected: Vec<Vec<usize>>,
    /// Aggregated scores that drove the selection, one per image.
    pub scores: Vec<Vec<f64>>,
    /// Sequence length entering the last layer.
    pub final_len: usize,
}

#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub cfg: VitConfig,
    pub patch_embed: Linear,
    pub class_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
}

/// Cuts `[B, H, W, ch]` pixels into `[B, N, P*P*ch]` row-major patches.
pub fn patchify<T: Scalar>(images: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.image_side || s[2] != cfg.image_side || s[3] != cfg.channels {
        return Err(config(format!(
            "expected images [B, {0}, {0}, {1}], got {s:?}",
            cfg.image_side, cfg.channels
        )));
    }
    cfg.validate_geometry()?;
    let (b, side, ch, p, grid) = (s[0], cfg.image_side, cfg.channels, cfg.patch, cfg.grid());
    let pd = cfg.patch_dim();
    let n = grid * grid;
    let src = images.data();
    let mut out = Vec::with_capacity(b * n * pd);
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for dy in 0..p {
                    let row = (bi * side + gy * p + dy) * side + gx * p;
                    out.extend_from_slice(&src[row * ch..(row + p) * ch]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, n, pd], out)?)
}

impl VitConfig {
    fn validate_geometry(&self) -> Result<()> {
        if self.patch == 0 || !self.image_side.is_multiple_of(self.patch) {
            return Err(config(format!(
                "image side {} is not divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        Ok(())
    }
}

impl VitEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let n = cfg.num_patches();
        let patch_embed = Linear::new(store, "image_encoder.patch_embed", cfg.patch_dim(), d, true, rng)?;
        let class_token = store.add("image_encoder.class_token", init::trunc_normal(rng, &[d], INIT_STD))?;
        let pos_embed = store.add("image_encoder.pos_embed", init::trunc_normal(rng, &[n + 1, d], INIT_STD))?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("image_encoder.layer{}", i + 1),
                    d,
                    cfg.heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(store, "image_encoder.ln_final", d)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            ln_final,
        })
    }

    /// `E_0 = [E_class, E^1 .. E^N] + E_pos` for a batch `[B, H, W, ch]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>) -> Result<TokenSequence> {
        let patches = patchify(images, &self.cfg)?;
        let b = patches.shape()[0];
        let d = self.cfg.dim;
        let patches = g.constant(patches);
        let e = self.patch_embed.forward(g, store, patches)?;
        let cls = g.param(store, self.class_token);
        let cls = g.reshape(cls, &[1, d])?;
        let cls = g.broadcast_to(cls, &[b, 1, d])?;
        let seq = g.concat(&[cls, e], 1)?;
        let pos = g.param(store, self.pos_embed);
        let tokens = g.add(seq, pos)?;
        Ok(TokenSequence {
            tokens,
            layer_index: 0,
            includes_class: true,
        })
    }

    /// Runs layer `seq.layer_index + 1`. With `capture`, also returns the
    /// class-token attention of every image in the batch.
    pub fn transformer_layer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: TokenSequence,
        capture: bool,
    ) -> Result<(TokenSequence, Option<Vec<AttentionRecord>>)> {
        let block = self
            .blocks
            .get(seq.layer_index)
            .ok_or_else(|| config(format!("no layer {} in a {}-layer encoder", seq.layer_index + 1, self.cfg.layers)))?;
        let (tokens, probs) = block.forward(g, store, seq.tokens)?;
        let out = TokenSequence {
            tokens,
            layer_index: seq.layer_index + 1,
            includes_class: seq.includes_class,
        };
        let records = capture.then(|| class_attention(g.value(probs), self.cfg.heads, out.layer_index));
        Ok((out, records))
    }

    /// Full attention maps `[M, T, T]` of one layer for every image; used by
    /// the rollout selector.
    fn full_attention<T: Scalar>(probs: &Tensor<T>, heads: usize) -> Vec<Tensor<f64>> {
        let t = probs.shape()[1];
        let per = heads * t * t;
        probs
            .to_f64_vec()
            .chunks(per)
            .map(|c| Tensor::new(vec![heads, t, t], c.to_vec()).expect("attention shape"))
            .collect()
    }

    /// Encodes a batch into `E_V [B, D]`, selecting tokens before the layers
    /// after `ssvp_layer` as requested.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        selection: &Selection,
    ) -> Result<Encoded> {
        let cfg = &self.cfg;
        cfg.validate()?;
        let b = images.shape().first().copied().unwrap_or(0);
        let mut seq = self.embed(g, store, images)?;
        let mut rollout_maps: Vec<Vec<Tensor<f64>>> = Vec::new();
        let rollout = matches!(selection, Selection::Attention(Selector::PsmLike));
        let mut attention = Vec::new();
        for layer in 1..=cfg.ssvp_layer {
            let block = &self.blocks[layer - 1];
            let (tokens, probs) = block.forward(g, store, seq.tokens)?;
            seq = TokenSequence {
                tokens,
                layer_index: layer,
                includes_class: true,
            };
            if rollout {
                rollout_maps.push(Self::full_attention(g.value(probs), cfg.heads));
            }
            if layer == cfg.ssvp_layer {
                attention = class_attention(g.value(probs), cfg.heads, layer);
            }
        }

        let mut selected = Vec::new();
        let mut scores = Vec::new();
        match selection {
            Selection::Disabled => {}
            Selection::Forced(ids) => {
                if ids.len() != b {
                    return Err(config(format!("forced selection for {} images, batch has {b}", ids.len())));
                }
                selected = ids.clone();
                scores = attention.iter().map(ssvp::aggregate_head_attention).collect();
            }
            Selection::Attention(selector) => {
                for i in 0..b {
                    let sel: SelectionResult = match selector {
                        Selector::Ssvp => ssvp::select_ssvp(&attention[i], cfg.k)?,
                        Selector::MhvmLike => ssvp::select_head_voting(&attention[i], cfg.k)?,
                        Selector::PsmLike => {
                            let maps: Vec<&Tensor<f64>> = rollout_maps.iter().map(|l| &l[i]).collect();
                            ssvp::select_rollout(&maps, cfg.k)?
                        }
                    };
                    selected.push(sel.ids);
                    scores.push(sel.scores);
                }
            }
        }
        if !selected.is_empty() {
            seq = ssvp::reassemble_sequence(g, seq, &selected)?;
        }
        let final_len = g.shape(seq.tokens)[1];
        while seq.layer_index < cfg.layers {
            seq = self.transformer_layer(g, store, seq, false)?.0;
        }
        let cls = g.narrow(seq.tokens, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, cfg.dim])?;
        let ev = self.ln_final.forward(g, store, cls)?;
        Ok(Encoded {
            ev,
            attention,
            selected,
            scores,
            final_len,
        })
    }
}

/// Extracts row 0, columns `1..T`, of every head from `[B*M, T, T]`.
fn class_attention<T: Scalar>(probs: &Tensor<T>, heads: usize, layer_index: usize) -> Vec<AttentionRecord> {
    let t = probs.shape()[1];
    let n = t - 1;
    let b = probs.shape()[0] / heads;
    let data = probs.data();
    (0..b)
        .map(|bi| {
            let mut a = Vec::with_capacity(heads * n);
            for m in 0..heads {
                let row = ((bi * heads + m) * t) * t;
                a.extend(data[row + 1..row + t].iter().map(|v| v.as_f64()));
            }
            AttentionRecord {
                a: Tensor::new(vec![heads, n], a).expect("attention record shape"),
                layer_index,
            }
        })
        .collect()
}
