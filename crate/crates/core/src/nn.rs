//! Building blocks shared by the image encoder, the text encoder and the
//! fusion module.

use mpfgvc_tensor::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var, LN_EPS};
use rand::Rng;

use crate::error::Result;

/// Std of the truncated-normal init of learned token embeddings.
pub const INIT_STD: f64 = 0.02;

/// Weight std of a linear map: `1/sqrt(fan_in)`. Plain SGD on a randomly
/// initialised encoder stalls with the 0.02 used for pretrained-style ViTs.
pub fn fan_in_std(d_in: usize) -> f64 {
    1.0 / (d_in as f64).sqrt()
}

/// Affine map `x W + b` on the last axis. `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init::trunc_normal(rng, &[d_in, d_out], fan_in_std(d_in)),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }
}

/// Pre-norm transformer layer:
/// `E' = MHSA(LN(E)) + E`, then `E_out = MLP(LN(E')) + E'`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            wq: Linear::new(store, &format!("{name}.mhsa.wq"), dim, dim, true, rng)?,
            wk: Linear::new(store, &format!("{name}.mhsa.wk"), dim, dim, true, rng)?,
            wv: Linear::new(store, &format!("{name}.mhsa.wv"), dim, dim, true, rng)?,
            wo: Linear::new(store, &format!("{name}.mhsa.wo"), dim, dim, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// Every parameter of the layer, in construction order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.ln1.gamma, self.ln1.beta];
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            out.push(l.weight);
            out.extend(l.bias);
        }
        out.extend([self.ln2.gamma, self.ln2.beta]);
        for l in [&self.fc1, &self.fc2] {
            out.push(l.weight);
            out.extend(l.bias);
        }
        out
    }

    /// `[B, T, D] -> [B*M, T, dh]`
    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, t, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * self.heads, t, dh])?)
    }

    /// Multi-head self-attention on `x [B, T, D]`. Returns the output and the
    /// post-softmax attention `[B*M, T, T]`.
    pub fn attention<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let dh = self.dim / self.heads;
        let q = self.wq.forward(g, store, x)?;
        let k = self.wk.forward(g, store, x)?;
        let v = self.wv.forward(g, store, x)?;
        let q = self.split_heads(g, q, b, t)?;
        let k = self.split_heads(g, k, b, t)?;
        let v = self.split_heads(g, v, b, t)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores)?;
        let ctx = g.bmm(probs, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, self.dim])?;
        Ok((self.wo.forward(g, store, ctx)?, probs))
    }

    /// Applies the layer to `x [B, T, D]`; also returns the attention probabilities.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let h = self.ln1.forward(g, store, x)?;
        let (attn, probs) = self.attention(g, store, h)?;
        let x = g.add(attn, x)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        Ok((g.add(h, x)?, probs))
    }
}
