//! Losses: the symmetric image/text pair contrastive terms, the visual
//! cross-entropy, the temperature-scaled image-to-class contrastive term and
//! the per-stage sums.

use mpfgvc_tensor::{Graph, Scalar, Var};

use crate::error::{config, Result};

/// Visual embeddings, per-class textual embeddings and labels of one batch.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    /// `[B, D]`
    pub v: Var,
    /// `[C, D]`
    pub t_class: Var,
    pub labels: Vec<usize>,
    pub tau: f64,
}

/// `cos(a_i, b_j)` for every pair: `[A, D] x [B, D] -> [A, B]`.
pub fn cosine_matrix<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let a = g.l2_normalize(a)?;
    let b = g.l2_normalize(b)?;
    Ok(g.matmul_t(a, b, true)?)
}

fn diagonal_labels(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_pairs<T: Scalar>(g: &Graph<T>, v: Var, t: Var) -> Result<()> {
    if g.shape(v) != g.shape(t) || g.shape(v).len() != 2 {
        return Err(config(format!(
            "pair losses need matching [B, D] batches, got {:?} and {:?}",
            g.shape(v),
            g.shape(t)
        )));
    }
    Ok(())
}

/// Image-to-text pair loss: mean over `i` of `-log softmax_j(cos(V_i, T_j))[i]`.
/// No temperature.
pub fn loss_i2t_pairs<T: Scalar>(g: &mut Graph<T>, v: Var, t: Var) -> Result<Var> {
    check_pairs(g, v, t)?;
    let b = g.shape(v)[0];
    let sims = cosine_matrix(g, v, t)?;
    Ok(g.cross_entropy(sims, &diagonal_labels(b))?)
}

/// Text-to-image counterpart: the softmax runs over images.
pub fn loss_t2i_pairs<T: Scalar>(g: &mut Graph<T>, v: Var, t: Var) -> Result<Var> {
    check_pairs(g, v, t)?;
    let b = g.shape(v)[0];
    let sims = cosine_matrix(g, t, v)?;
    Ok(g.cross_entropy(sims, &diagonal_labels(b))?)
}

/// Cross-entropy of classifier logits `[B, C]`, `C >= 2`.
pub fn loss_v<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let c = g.shape(logits).last().copied().unwrap_or(0);
    if c < 2 {
        return Err(config(format!("classification needs at least two classes, got {c}")));
    }
    Ok(g.cross_entropy(logits, labels)?)
}

/// Image-to-class contrastive loss with temperature:
/// mean over `i` of `-log softmax_c(cos(V_i, T^c) / tau)[y_i]`.
pub fn loss_i2t_class<T: Scalar>(g: &mut Graph<T>, be: &BatchEmbeddings) -> Result<Var> {
    if !(be.tau > 0.0 && be.tau.is_finite()) {
        return Err(config("tau must be positive"));
    }
    let c = g.shape(be.t_class)[0];
    if c < 2 {
        return Err(config(format!("class contrastive loss needs at least two classes, got {c}")));
    }
    let sims = cosine_matrix(g, be.v, be.t_class)?;
    let logits = g.scale(sims, 1.0 / be.tau);
    Ok(g.cross_entropy(logits, &be.labels)?)
}

/// The terms of the first-stage objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss {
    pub l_v: Var,
    /// Absent when the variant has no text prompt.
    pub l_i2t: Option<Var>,
    pub total: Var,
}

/// `L_v + L_i2t`, unweighted.
pub fn stage1_loss<T: Scalar>(g: &mut Graph<T>, logits1: Var, be: &BatchEmbeddings) -> Result<Stage1Loss> {
    let l_v = loss_v(g, logits1, &be.labels)?;
    let l_i2t = loss_i2t_class(g, be)?;
    let total = g.add(l_v, l_i2t)?;
    Ok(Stage1Loss {
        l_v,
        l_i2t: Some(l_i2t),
        total,
    })
}

/// Cross-entropy on the fusion head logits.
pub fn stage2_loss<T: Scalar>(g: &mut Graph<T>, logits2: Var, labels: &[usize]) -> Result<Var> {
    loss_v(g, logits2, labels)
}
