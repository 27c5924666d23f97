//! Vision-language fusion: one query from the visual embedding attends over the
//! visual embedding and every class embedding, the weighted values pass
//! through a 4x-expansion translation layer, and a fresh head classifies.

use mpfgvc_tensor::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

use crate::config::FusionMode;
use crate::error::{config, Result};
use crate::nn::Linear;
use crate::objectives::cosine_matrix;

pub const EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub struct Vlfm {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub trans_expand: Linear,
    pub trans_project: Linear,
    pub head2: Linear,
    pub dim: usize,
}

/// Tape handles of one batched fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    /// `[B, 1, n]` with `n = C + 1` (or 1 in self-attention-only mode).
    pub s: Var,
    /// `[B, D]`
    pub ev_prime: Var,
    /// `[B, D]`
    pub ev_hat: Var,
    /// `[B, C]`
    pub logits: Var,
}

/// Plain values of one image's fusion pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionState {
    pub s: Vec<f64>,
    pub ev_prime: Vec<f64>,
    pub ev_hat: Vec<f64>,
    pub logits: Vec<f64>,
}

impl FusionState {
    pub fn from_graph<T: Scalar>(g: &Graph<T>, vars: &FusionVars, image: usize) -> Self {
        let row = |v: Var| {
            let t = g.value(v);
            let w = t.numel() / t.shape()[0];
            t.data()[image * w..(image + 1) * w].iter().map(|x| x.as_f64()).collect()
        };
        Self {
            s: row(vars.s),
            ev_prime: row(vars.ev_prime),
            ev_hat: row(vars.ev_hat),
            logits: row(vars.logits),
        }
    }
}

impl Vlfm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = EXPANSION * dim;
        Ok(Self {
            wq: Linear::new(store, "vlfm.wq", dim, dim, true, rng)?,
            wk: Linear::new(store, "vlfm.wk", dim, dim, true, rng)?,
            wv: Linear::new(store, "vlfm.wv", dim, dim, true, rng)?,
            trans_expand: Linear::new(store, "vlfm.trans_expand", dim, hidden, true, rng)?,
            trans_project: Linear::new(store, "vlfm.trans_project", hidden, dim, true, rng)?,
            head2: Linear::new(store, "vlfm.head2", dim, classes, true, rng)?,
            dim,
        })
    }

    /// Stacks `[E_V; E_T]` per image: `[B, 1 + C, D]` (just `[B, 1, D]` without text).
    pub fn tokens<T: Scalar>(&self, g: &mut Graph<T>, ev: Var, et: Option<Var>) -> Result<Var> {
        let b = g.shape(ev)[0];
        let d = self.dim;
        let ev3 = g.reshape(ev, &[b, 1, d])?;
        match et {
            Some(et) if g.shape(et)[0] > 0 => {
                let c = g.shape(et)[0];
                let et = g.broadcast_to(et, &[b, c, d])?;
                Ok(g.concat(&[ev3, et], 1)?)
            }
            _ => Ok(ev3),
        }
    }

    /// `Q0 = Wq E_V` (`[B, 1, D]`) and shared-projection `K`, `V` (`[B, n, D]`).
    pub fn project_qkv<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ev: Var,
        tokens: Var,
    ) -> Result<(Var, Var, Var)> {
        let b = g.shape(ev)[0];
        let q = self.wq.forward(g, store, ev)?;
        let q = g.reshape(q, &[b, 1, self.dim])?;
        let k = self.wk.forward(g, store, tokens)?;
        let v = self.wv.forward(g, store, tokens)?;
        Ok((q, k, v))
    }

    /// `S = softmax(Q0 K^T / sqrt(D))` over all rows jointly: `[B, 1, n]`.
    pub fn cross_modal_attention<T: Scalar>(&self, g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
        let logits = g.bmm(q, k, true)?;
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        Ok(g.softmax(logits)?)
    }

    /// `E'_V = sum_i S_i V_i`: `[B, 1, n] x [B, n, D] -> [B, D]`.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, s: Var, v: Var) -> Result<Var> {
        let b = g.shape(s)[0];
        let f = g.bmm(s, v, false)?;
        Ok(g.reshape(f, &[b, self.dim])?)
    }

    /// `project(GELU(expand(x)))`, hidden width `4D`.
    pub fn translate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.trans_expand.forward(g, store, x)?;
        let h = g.gelu(h);
        self.trans_project.forward(g, store, h)
    }

    /// Runs the module on `E_V [B, D]` and `E_T [C, D]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ev: Var,
        et: Var,
        mode: FusionMode,
    ) -> Result<FusionVars> {
        let text = match mode {
            FusionMode::Vlfm => Some(et),
            FusionMode::SelfAttentionOnly => None,
            other => return Err(config(format!("fusion module cannot run in {other:?} mode"))),
        };
        let tokens = self.tokens(g, ev, text)?;
        let (q, k, v) = self.project_qkv(g, store, ev, tokens)?;
        let s = self.cross_modal_attention(g, q, k)?;
        let ev_prime = self.fuse(g, s, v)?;
        let ev_hat = self.translate(g, store, ev_prime)?;
        let logits = self.head2.forward(g, store, ev_hat)?;
        Ok(FusionVars {
            s,
            ev_prime,
            ev_hat,
            logits,
        })
    }
}

/// `argmax_c cos(E_V, E_T^c)` per image; ties go to the smaller class index.
pub fn similarity_predict<T: Scalar>(g: &mut Graph<T>, ev: Var, et: Var) -> Result<Vec<usize>> {
    let sims = cosine_matrix(g, ev, et)?;
    let t = g.value(sims);
    let c = t.shape()[1];
    Ok(t.data().chunks(c).map(argmax).collect())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
