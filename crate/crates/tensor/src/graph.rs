//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node to the tape, so creation order is already a
//! topological order and `backward` simply walks the tape in reverse.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel_of, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    /// `a [*, k] · b [k, n]` (or `b [n, k]` transposed).
    MatMul { a: Var, b: Var, trans_b: bool },
    /// `a [G, m, k] · b [G, k, n]` (or `b [G, n, k]` transposed).
    Bmm { a: Var, b: Var, trans_b: bool },
    /// `b` broadcasts over the leading dims of `a`.
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    BroadcastTo { a: Var },
    Narrow { a: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { a: Var, index: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    L2Normalize { a: Var, norms: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single computation tape. One tape per forward/backward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
    track_frozen: bool,
    no_grad: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output linear index, the input linear index it reads from.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = shape.len();
    let n = numel_of(shape);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        let off: usize = (0..rank).map(|i| counter[i] * in_strides[perm[i]]).sum();
        map.push(off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    map
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            track_frozen: false,
            no_grad: false,
        }
    }

    /// A tape on which no node requires a gradient (evaluation passes).
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    /// Also compute gradients for frozen parameters. They are never applied by
    /// the optimizer, but tests can inspect them.
    pub fn track_frozen(mut self, yes: bool) -> Self {
        self.track_frozen = yes;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        self.grads.push(None);
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        let shape = self.shape(v).to_vec();
        self.grads[v.0].as_ref().map(|g| {
            let mut t = Tensor::new(shape, g.clone()).expect("grad shape");
            t.requires_grad = false;
            t
        })
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (not tied to a stored parameter).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Each parameter maps to one leaf per tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let mut value = p.tensor.clone();
        value.grad = None;
        let rg = !p.frozen || self.track_frozen;
        let v = self.push(value, Op::Leaf, rg);
        self.param_vars.insert(id, v);
        v
    }

    /// Adds leaf gradients into the matching parameters' `grad` slots.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.param_vars {
            if !self.rg(v) {
                continue;
            }
            let Some(g) = self.grads[v.0].as_ref() else {
                continue;
            };
            let slot = &mut store.get_mut(id).tensor;
            match slot.grad.as_mut() {
                Some(acc) => {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                None => slot.grad = Some(g.clone()),
            }
        }
    }

    // ---------------------------------------------------------------- forward

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// `a [*, k] · op(b)` where `op(b) = b` for `b [k, n]`, or `b^T` for `b [n, k]`
    /// when `trans_b` is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", format!("inner dims {sa:?} x {sb:?}")));
        }
        let rows = numel_of(&sa) / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        let bs = if trans_b { [1, k] } else { [n, 1] };
        T::gemm(
            rows,
            k,
            n,
            self.value(a).data(),
            [k, 1],
            self.value(b).data(),
            bs,
            T::zero(),
            &mut out,
            [n, 1],
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Batched product over a shared leading dimension.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("bmm", format!("inner dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); g * m * n];
        let bs = if trans_b { [1, k] } else { [n, 1] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                [k, 1],
                &bv[i * k * n..(i + 1) * k * n],
                bs,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                [n, 1],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    /// Elementwise `a + b`; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Elementwise `a * b`; `b`'s shape must be a suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * factor).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, factor }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let n = T::lit(v.numel().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::Mean { a }, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let d = *v.shape().last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", sx, self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let v = self.value(a);
        let out = v
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Gelu { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("perm {perm:?} for shape {sa:?}")));
        }
        let map = permute_map(&sa, perm);
        let src = self.value(a).data();
        let out: Vec<T> = map.iter().map(|&i| src[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Repeats `a` over new leading dims; `a`'s shape must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if !is_suffix(shape, sa) {
            return Err(shape_err("broadcast_to", format!("{sa:?} -> {shape:?}")));
        }
        let src = self.value(a).data();
        let n = src.len();
        let out: Vec<T> = (0..numel_of(shape)).map(|i| src[i % n]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::BroadcastTo { a }, rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(shape_err("narrow", format!("axis {axis} [{start}, +{len}) of {sa:?}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { a, axis, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat { inputs: inputs.to_vec(), axis },
            rg,
        ))
    }

    /// For `a [G, T, R]`, picks rows `index[g]` from group `g`, giving `[G, K, R]`.
    pub fn gather_rows(&mut self, a: Var, index: &[Vec<usize>]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || index.len() != sa[0] {
            return Err(shape_err("gather_rows", format!("{sa:?} with {} index lists", index.len())));
        }
        let k = index.first().map_or(0, Vec::len);
        let (t, r) = (sa[1], sa[2]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(sa[0] * k * r);
        for (g, idx) in index.iter().enumerate() {
            if idx.len() != k {
                return Err(shape_err("gather_rows", "ragged index lists"));
            }
            for &i in idx {
                if i >= t {
                    return Err(TensorError::Index { op: "gather_rows", index: i, size: t });
                }
                let base = (g * t + i) * r;
                out.extend_from_slice(&src[base..base + r]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![sa[0], k, r], out)?,
            Op::GatherRows { a, index: index.to_vec() },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`. `logits` is `[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() || sl[1] == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {sl:?} with {} labels", labels.len()),
            ));
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad, size: c });
        }
        let lv = self.value(logits).data();
        if lv.iter().any(|x| x.is_nan()) {
            return Err(TensorError::Numeric { op: "cross_entropy" });
        }
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
            loss = loss + (lz - (row[labels[i]] - m));
        }
        let loss = loss / T::lit(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let d = *v.shape().last().ok_or_else(|| shape_err("l2_normalize", "scalar input"))?;
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for (r, row) in out.chunks_mut(d.max(1)).enumerate() {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n == T::zero() || !n.is_finite() {
                return Err(TensorError::Degenerate {
                    op: "l2_normalize",
                    detail: format!("row {r} has norm {n}"),
                });
            }
            for x in row.iter_mut() {
                *x = *x / n;
            }
            norms.push(n);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::L2Normalize { a, norms }, rg))
    }

    /// `dot(u, v) / (|u| |v|)` for two vectors of equal length, as a scalar node.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        if su.len() != 1 || su != sv {
            return Err(shape_err("cosine_similarity", format!("{su:?} vs {sv:?}")));
        }
        let d = su[0];
        let u2 = self.reshape(u, &[1, d])?;
        let v2 = self.reshape(v, &[1, d])?;
        let un = self.l2_normalize(u2)?;
        let vn = self.l2_normalize(v2)?;
        let c = self.matmul_t(un, vn, true)?;
        self.reshape(c, &[])
    }

    // --------------------------------------------------------------- backward

    /// Reverse replay from a scalar `loss`. Gradients accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        // Each call propagates a fresh unit seed; earlier results are added back after.
        let previous = std::mem::replace(&mut self.grads, vec![None; self.nodes.len()]);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        for (slot, old) in self.grads.iter_mut().zip(previous) {
            match (slot.as_mut(), old) {
                (Some(new), Some(old)) => {
                    for (a, b) in new.iter_mut().zip(old) {
                        *a = *a + b;
                    }
                }
                (None, Some(old)) => *slot = Some(old),
                _ => {}
            }
        }
        Ok(())
    }

    /// Clears every gradient stored on the tape.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &[T]) {
        let Self { nodes, grads, .. } = self;
        let node = &nodes[i];
        let needs = |v: &Var| nodes[v.0].requires_grad;
        // Splitting borrows: `grads[v]` for inputs never aliases `gout`.
        fn buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let k = *av.shape().last().unwrap();
                let rows = av.numel() / k.max(1);
                let n = gout.len() / rows.max(1);
                let (brs, bcs) = if *trans_b { (1, k) } else { (n, 1) };
                if needs(a) {
                    let da = buf(grads, *a, av.numel());
                    T::gemm(rows, n, k, gout, [n, 1], bv.data(), [bcs, brs], T::one(), da, [k, 1]);
                }
                if needs(b) {
                    let db = buf(grads, *b, bv.numel());
                    if *trans_b {
                        T::gemm(n, rows, k, gout, [1, n], av.data(), [k, 1], T::one(), db, [k, 1]);
                    } else {
                        T::gemm(k, rows, n, av.data(), [1, k], gout, [n, 1], T::one(), db, [n, 1]);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (g, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = gout.len() / (g * m).max(1);
                let (brs, bcs) = if *trans_b { (1, k) } else { (n, 1) };
                if needs(a) {
                    let da = buf(grads, *a, av.numel());
                    for j in 0..g {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gout[j * m * n..(j + 1) * m * n],
                            [n, 1],
                            &bv.data()[j * k * n..(j + 1) * k * n],
                            [bcs, brs],
                            T::one(),
                            &mut da[j * m * k..(j + 1) * m * k],
                            [k, 1],
                        );
                    }
                }
                if needs(b) {
                    let db = buf(grads, *b, bv.numel());
                    for j in 0..g {
                        let go = &gout[j * m * n..(j + 1) * m * n];
                        let aj = &av.data()[j * m * k..(j + 1) * m * k];
                        let dbj = &mut db[j * k * n..(j + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, go, [1, n], aj, [k, 1], T::one(), dbj, [k, 1]);
                        } else {
                            T::gemm(k, m, n, aj, [1, k], go, [n, 1], T::one(), dbj, [n, 1]);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    let da = buf(grads, *a, gout.len());
                    for (d, &g) in da.iter_mut().zip(gout) {
                        *d = *d + g;
                    }
                }
                if needs(b) {
                    let nb = nodes[b.0].value.numel();
                    let db = buf(grads, *b, nb);
                    for (j, &g) in gout.iter().enumerate() {
                        db[j % nb] = db[j % nb] + g;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let nb = bv.len();
                if needs(a) {
                    let da = buf(grads, *a, av.len());
                    for (j, &g) in gout.iter().enumerate() {
                        da[j] = da[j] + g * bv[j % nb];
                    }
                }
                if needs(b) {
                    let db = buf(grads, *b, nb);
                    for (j, &g) in gout.iter().enumerate() {
                        db[j % nb] = db[j % nb] + g * av[j];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if needs(a) {
                    let da = buf(grads, *a, gout.len());
                    for (d, &g) in da.iter_mut().zip(gout) {
                        *d = *d + g * *factor;
                    }
                }
            }
            Op::Sum { a } | Op::Mean { a } => {
                if needs(a) {
                    let n = nodes[a.0].value.numel();
                    let g = match node.op {
                        Op::Mean { .. } => gout[0] / T::lit(n.max(1) as f64),
                        _ => gout[0],
                    };
                    let da = buf(grads, *a, n);
                    for d in da.iter_mut() {
                        *d = *d + g;
                    }
                }
            }
            Op::Softmax { a } => {
                if needs(a) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let da = buf(grads, *a, y.len());
                    for r in 0..y.len() / d.max(1) {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &gout[r * d..(r + 1) * d]);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                        for j in 0..d {
                            da[r * d + j] = da[r * d + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.numel();
                let rows = xhat.len() / d.max(1);
                if needs(gamma) {
                    let dg = buf(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(beta) {
                    let db = buf(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] = db[j] + gout[r * d + j];
                        }
                    }
                }
                if needs(x) {
                    let gv = nodes[gamma.0].value.data().to_vec();
                    let dn = T::lit(d as f64);
                    let dx = buf(grads, *x, xhat.len());
                    for r in 0..rows {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..d {
                            let gh = gout[r * d + j] * gv[j];
                            mean_g = mean_g + gh;
                            mean_gx = mean_gx + gh * xhat[r * d + j];
                        }
                        mean_g = mean_g / dn;
                        mean_gx = mean_gx / dn;
                        for j in 0..d {
                            let gh = gout[r * d + j] * gv[j];
                            dx[r * d + j] = dx[r * d + j]
                                + rstd[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if needs(a) {
                    let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let xv = nodes[a.0].value.data();
                    let da = buf(grads, *a, xv.len());
                    for (j, &x) in xv.iter().enumerate() {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dudx = c * (T::one() + three * k * x * x);
                        let dg = half * (T::one() + t) + half * x * (T::one() - t * t) * dudx;
                        da[j] = da[j] + gout[j] * dg;
                    }
                }
            }
            Op::Reshape { a } | Op::BroadcastTo { a } => {
                if needs(a) {
                    let n = nodes[a.0].value.numel();
                    let da = buf(grads, *a, n);
                    for (j, &g) in gout.iter().enumerate() {
                        da[j % n] = da[j % n] + g;
                    }
                }
            }
            Op::Permute { a, perm } => {
                if needs(a) {
                    let map = permute_map(nodes[a.0].value.shape(), perm);
                    let da = buf(grads, *a, gout.len());
                    for (j, &src) in map.iter().enumerate() {
                        da[src] = da[src] + gout[j];
                    }
                }
            }
            Op::Narrow { a, axis, start } => {
                if needs(a) {
                    let sa = nodes[a.0].value.shape();
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let full = sa[*axis];
                    let da = buf(grads, *a, numel_of(sa));
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        for (d, &g) in da[base..base + len * inner].iter_mut().zip(src) {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let row = s[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].value.shape()[*axis] * inner;
                    if needs(v) {
                        let dv = buf(grads, *v, outer * len);
                        for o in 0..outer {
                            let src = &gout[o * row + offset..o * row + offset + len];
                            for (d, &g) in dv[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d = *d + g;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows { a, index } => {
                if needs(a) {
                    let sa = nodes[a.0].value.shape();
                    let (t, r) = (sa[1], sa[2]);
                    let k = node.value.shape()[1];
                    let da = buf(grads, *a, numel_of(sa));
                    for (g, idx) in index.iter().enumerate() {
                        for (j, &src) in idx.iter().enumerate() {
                            let dst = (g * t + src) * r;
                            let from = (g * k + j) * r;
                            for c in 0..r {
                                da[dst + c] = da[dst + c] + gout[from + c];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(logits) {
                    let b = labels.len();
                    let c = probs.len() / b.max(1);
                    let scale = gout[0] / T::lit(b as f64);
                    let dl = buf(grads, *logits, probs.len());
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            dl[i * c + j] = dl[i * c + j] + scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                if needs(a) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let da = buf(grads, *a, y.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &gout[r * d..(r + 1) * d]);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                        for j in 0..d {
                            da[r * d + j] = da[r * d + j] + (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
        }
    }
}
