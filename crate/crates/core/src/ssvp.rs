//! Attention-driven token selection before the last encoder layers.
//!
//! The head-summed class-token attention ranks the patch tokens; the top `k`
//! (descending, smaller index first on ties) follow the class token into the
//! remaining layers. Two reference selectors (attention rollout and per-head
//! voting) are simplified stand-ins for other part-selection schemes.

use std::cmp::Ordering;
use std::collections::HashSet;

use mpfgvc_tensor::{Graph, Scalar, Tensor, TensorError};

use crate::error::{config, Result};
use crate::vit::{AttentionRecord, TokenSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Patch indices in `[0, N)`, highest score first.
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Sum over heads of an `[M, N]` record.
pub fn aggregate_head_attention(rec: &AttentionRecord) -> Vec<f64> {
    let n = rec.num_patches();
    let mut out = vec![0.0; n];
    for row in rec.a.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    |&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Indices of the `k` largest scores, descending; ties go to the smaller index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<SelectionResult> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(config(format!("k = {k} outside [1, {n}]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TensorError::Numeric { op: "topk" }.into());
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let cmp = by_score_then_index(scores);
    if k < n {
        ids.select_nth_unstable_by(k - 1, &cmp);
        ids.truncate(k);
    }
    ids.sort_by(&cmp);
    Ok(SelectionResult {
        ids,
        scores: scores.to_vec(),
    })
}

pub fn select_ssvp(rec: &AttentionRecord, k: usize) -> Result<SelectionResult> {
    topk_indices(&aggregate_head_attention(rec), k)
}

/// Per-head voting: each head votes for its own top `k`; votes decide, summed
/// attention breaks ties.
pub fn select_head_voting(rec: &AttentionRecord, k: usize) -> Result<SelectionResult> {
    let n = rec.num_patches();
    let m = rec.heads();
    let total = aggregate_head_attention(rec);
    let mut votes = vec![0.0; n];
    for row in rec.a.data().chunks(n) {
        for id in topk_indices(row, k)?.ids {
            votes[id] += 1.0;
        }
    }
    // Summed attention is at most M, so scaling by 1/(M+1) keeps it below one vote.
    let scores: Vec<f64> = votes.iter().zip(&total).map(|(v, t)| v + t / (m as f64 + 1.0)).collect();
    topk_indices(&scores, k)
}

/// Attention rollout: multiplies the head-averaged maps of every layer up to
/// the selection layer (each mixed half-and-half with the identity for the
/// residual path) and ranks patches by the class-token row.
pub fn select_rollout(maps: &[&Tensor<f64>], k: usize) -> Result<SelectionResult> {
    let first = maps.first().ok_or_else(|| config("rollout needs at least one layer"))?;
    let t = first.shape()[1];
    let mut rollout = identity(t);
    for map in maps {
        let heads = map.shape()[0];
        let mut avg = vec![0.0; t * t];
        for h in map.data().chunks(t * t) {
            for (a, v) in avg.iter_mut().zip(h) {
                *a += v / heads as f64;
            }
        }
        for i in 0..t {
            avg[i * t + i] += 1.0;
            let row = &mut avg[i * t..(i + 1) * t];
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        rollout = square_matmul(&avg, &rollout, t);
    }
    topk_indices(&rollout[1..t], k)
}

fn identity(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        m[i * t + i] = 1.0;
    }
    m
}

fn square_matmul(a: &[f64], b: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for p in 0..t {
            let av = a[i * t + p];
            for j in 0..t {
                out[i * t + j] += av * b[p * t + j];
            }
        }
    }
    out
}

/// `[E_class, E^{id(1)}, .., E^{id(k)}]` for every image in the batch.
pub fn reassemble_sequence<T: Scalar>(
    g: &mut Graph<T>,
    seq: TokenSequence,
    ids: &[Vec<usize>],
) -> Result<TokenSequence> {
    if !seq.includes_class {
        return Err(TensorError::Contract("sequence has no class token".into()).into());
    }
    let n = g.shape(seq.tokens)[1] - 1;
    let mut rows = Vec::with_capacity(ids.len());
    for per_image in ids {
        let mut r = Vec::with_capacity(per_image.len() + 1);
        r.push(0);
        for &id in per_image {
            if id >= n {
                return Err(TensorError::Contract(format!("patch id {id} out of range for N = {n}")).into());
            }
            r.push(id + 1);
        }
        rows.push(r);
    }
    let tokens = g.gather_rows(seq.tokens, &rows)?;
    Ok(TokenSequence { tokens, ..seq })
}

/// `|ids ∩ truth| / min(k, s)`.
pub fn hit_rate(ids: &[usize], truth: &[usize]) -> f64 {
    let denom = ids.len().min(truth.len());
    if denom == 0 {
        return 0.0;
    }
    let truth: HashSet<_> = truth.iter().collect();
    ids.iter().filter(|i| truth.contains(i)).count() as f64 / denom as f64
}
