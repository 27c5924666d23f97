//! Two-stage training, the one-stage alternative, and evaluation.

use std::fmt::Write as _;

use mpfgvc_tensor::{sgd_step, Graph, LrSchedule, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FusionMode;
use crate::data::Split;
use crate::error::{config, Error, Result};
use crate::model::{Model, Phase};
use crate::objectives::{loss_i2t_class, loss_v, stage2_loss, BatchEmbeddings};
use crate::ssvp;
use crate::vit::Selection;
use crate::vlfm::{argmax, similarity_predict};

/// Images per inference batch.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub l_v: Option<f64>,
    pub l_i2t: Option<f64>,
    pub l_stage: f64,
}

/// Per-step losses of one or more training phases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRecord>,
}

impl LossLog {
    pub const HEADER: &'static str = "stage,step,lr,l_v,l_i2t,l_stage";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.9e},{},{},{:.9e}",
                r.stage,
                r.step,
                r.lr,
                opt(r.l_v),
                opt(r.l_i2t),
                r.l_stage
            );
        }
        s
    }
}

/// Summary of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub steps: usize,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl StageReport {
    pub fn first_loss(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

fn mix_seed(seed: u64, tag: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag.rotate_left(32) ^ epoch as u64
}

struct Loop {
    stage: &'static str,
    epochs: usize,
    lr: f64,
    tag: u64,
}

fn scalar<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

/// Shared epoch/batch/schedule loop. `step` builds the loss on a fresh tape
/// and returns `(total, l_v, l_i2t)`.
fn run_loop<T, F>(model: &mut Model<T>, data: &Split, lp: Loop, log: &mut LossLog, mut step: F) -> Result<StageReport>
where
    T: Scalar,
    F: FnMut(&Model<T>, &mut Graph<T>, &[usize], &mut ChaCha8Rng) -> Result<(Var, Option<Var>, Option<Var>)>,
{
    if data.is_empty() {
        return Err(config("training split is empty"));
    }
    let tc = model.cfg.train.clone();
    let bs = tc.batch_size.min(data.len());
    let per_epoch = data.len().div_ceil(bs);
    let sched = LrSchedule::cosine(lp.lr, lp.epochs * per_epoch).with_warmup(tc.warmup_epochs * per_epoch);
    let mut epoch_losses = Vec::with_capacity(lp.epochs);
    let mut t = 0;
    for epoch in 0..lp.epochs {
        let seed = mix_seed(tc.seed, lp.tag, epoch);
        let order = data.order(seed);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        let mut sum = 0.0;
        for batch in order.chunks(bs) {
            let lr = sched.lr(t);
            let mut g = Graph::new();
            let (total, l_v, l_i2t) = step(model, &mut g, batch, &mut aug_rng)?;
            let value = scalar(&g, total);
            let l_v = l_v.map(|v| scalar(&g, v));
            let l_i2t = l_i2t.map(|v| scalar(&g, v));
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: lp.stage.to_string(),
                    step: t,
                    detail: format!("loss {value} (l_v {l_v:?}, l_i2t {l_i2t:?}) at lr {lr:e}"),
                });
            }
            g.backward(total)?;
            g.accumulate_param_grads(&mut model.store);
            sgd_step(model.store.params_mut(), lr)?;
            log.rows.push(LossRecord {
                stage: lp.stage.to_string(),
                step: t,
                lr,
                l_v,
                l_i2t,
                l_stage: value,
            });
            sum += value * batch.len() as f64;
            t += 1;
        }
        let mean = sum / data.len() as f64;
        log::debug!("{} epoch {}: loss {mean:.5}", lp.stage, epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(StageReport {
        stage: lp.stage.to_string(),
        steps: t,
        epoch_losses,
    })
}

fn batch_images<T: Scalar>(model: &Model<T>, data: &Split, ids: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    if model.cfg.train.hflip {
        let flips: Vec<bool> = ids.iter().map(|_| rng.random::<bool>()).collect();
        data.batch(ids, Some(&flips))
    } else {
        data.batch(ids, None)
    }
}

fn labels_of(data: &Split, ids: &[usize]) -> Vec<usize> {
    ids.iter().map(|&i| data.labels[i]).collect()
}

/// Stage 1: image encoder, prompt tokens and head1 minimise `L_v + L_i2t`
/// (just `L_v` for variants without the text prompt).
pub fn train_stage1<T: Scalar>(model: &mut Model<T>, data: &Split, log: &mut LossLog) -> Result<StageReport> {
    model.set_phase(Phase::Stage1);
    let tc = model.cfg.train.clone();
    let datp = model.cfg.variant.datp;
    let selection = model.selection();
    let lp = Loop {
        stage: "stage1",
        epochs: tc.epochs_stage1,
        lr: tc.lr_stage1,
        tag: 1,
    };
    let report = run_loop(model, data, lp, log, |m, g, ids, rng| {
        let images = batch_images(m, data, ids, rng);
        let labels = labels_of(data, ids);
        let f = m.forward(g, &images, &selection, datp, None)?;
        let l_v = loss_v(g, f.logits1, &labels)?;
        match f.et {
            Some(et) => {
                let be = BatchEmbeddings {
                    v: f.encoded.ev,
                    t_class: et,
                    labels,
                    tau: tc.tau,
                };
                let l_i2t = loss_i2t_class(g, &be)?;
                Ok((g.add(l_v, l_i2t)?, Some(l_v), Some(l_i2t)))
            }
            None => Ok((l_v, Some(l_v), None)),
        }
    })?;
    model.set_phase(Phase::Frozen);
    Ok(report)
}

/// Frozen-encoder features of a split: `E_V [n, D]` and `E_T [C, D]`.
pub fn extract_features<T: Scalar>(model: &Model<T>, data: &Split) -> Result<(Tensor<T>, Tensor<T>)> {
    let selection = model.selection();
    let ids: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<T>> = ids
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let mut g = Graph::inference();
            let images = data.batch::<T>(chunk, None);
            let enc = model.vit.encode(&mut g, &model.store, &images, &selection)?;
            Ok(g.value(enc.ev).data().to_vec())
        })
        .collect::<Result<_>>()?;
    let ev = Tensor::new(vec![data.len(), model.cfg.vit.dim], chunks.concat())?;
    let mut g = Graph::inference();
    let et = model.encode_text(&mut g)?;
    Ok((ev, g.value(et).clone()))
}

/// Stage 2: only the fusion module minimises the fusion-head cross-entropy.
/// The encoders are frozen, so their outputs are computed once up front.
pub fn train_stage2<T: Scalar>(model: &mut Model<T>, data: &Split, log: &mut LossLog) -> Result<StageReport> {
    let mode = model.cfg.variant.fusion;
    if !mode.trains_fusion() {
        return Err(config(format!("fusion mode {mode:?} has no second stage")));
    }
    let (ev_all, et_all) = extract_features(model, data)?;
    let d = model.cfg.vit.dim;
    model.set_phase(Phase::Stage2);
    let tc = model.cfg.train.clone();
    let lp = Loop {
        stage: "stage2",
        epochs: tc.epochs_stage2,
        lr: tc.lr_stage2,
        tag: 2,
    };
    let report = run_loop(model, data, lp, log, |m, g, ids, _| {
        let rows: Vec<T> = ids.iter().flat_map(|&i| ev_all.row(i).iter().copied()).collect();
        let ev = g.constant(Tensor::new(vec![ids.len(), d], rows)?);
        let et = g.constant(et_all.clone());
        let fv = m.vlfm.forward(g, &m.store, ev, et, mode)?;
        let loss = stage2_loss(g, fv.logits, &labels_of(data, ids))?;
        Ok((loss, None, None))
    })?;
    model.set_phase(Phase::Frozen);
    Ok(report)
}

/// Joint training of image encoder, prompts, head1 and fusion module on
/// `L_v + L_i2t + L_fusion` for `epochs_stage1 + epochs_stage2` epochs at
/// the stage-1 learning rate.
pub fn train_one_stage<T: Scalar>(model: &mut Model<T>, data: &Split, log: &mut LossLog) -> Result<StageReport> {
    let mode = model.cfg.variant.fusion;
    if !mode.trains_fusion() {
        return Err(config(format!("one-stage training needs a fusion module, got {mode:?}")));
    }
    model.set_phase(Phase::OneStage);
    let tc = model.cfg.train.clone();
    let datp = model.cfg.variant.datp;
    let selection = model.selection();
    let lp = Loop {
        stage: "one-stage",
        epochs: tc.epochs_stage1 + tc.epochs_stage2,
        lr: tc.lr_stage1,
        tag: 3,
    };
    let report = run_loop(model, data, lp, log, |m, g, ids, rng| {
        let images = batch_images(m, data, ids, rng);
        let labels = labels_of(data, ids);
        let f = m.forward(g, &images, &selection, datp, Some(mode))?;
        let l_v = loss_v(g, f.logits1, &labels)?;
        let l_f = stage2_loss(g, f.fusion.expect("fusion output").logits, &labels)?;
        let mut total = g.add(l_v, l_f)?;
        let mut l_i2t = None;
        if let Some(et) = f.et.filter(|_| datp) {
            let be = BatchEmbeddings {
                v: f.encoded.ev,
                t_class: et,
                labels,
                tau: tc.tau,
            };
            let l = loss_i2t_class(g, &be)?;
            total = g.add(total, l)?;
            l_i2t = Some(l);
        }
        Ok((total, Some(l_v), l_i2t))
    })?;
    model.set_phase(Phase::Frozen);
    Ok(report)
}

/// What produces the prediction at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Head1,
    Similarity,
    Vlfm,
}

impl EvalMode {
    /// The evaluation that matches a variant's fusion setting.
    pub fn for_fusion(f: FusionMode) -> Self {
        match f {
            FusionMode::None => EvalMode::Head1,
            FusionMode::Similarity => EvalMode::Similarity,
            FusionMode::Vlfm | FusionMode::SelfAttentionOnly => EvalMode::Vlfm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
    /// Mean selection hit-rate against the planted patches (when selection ran).
    pub hit_rate: Option<f64>,
}

/// Top-1 accuracy on `data` with the chosen predictor.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Split, mode: EvalMode) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(config("cannot evaluate on an empty dataset"));
    }
    let fusion = model.cfg.variant.fusion;
    if mode == EvalMode::Vlfm && !fusion.trains_fusion() {
        return Err(config(format!("vlfm evaluation needs a fusion variant, got {fusion:?}")));
    }
    let selection = model.selection();
    let ids: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<(Vec<usize>, Vec<f64>)> = ids
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let mut g = Graph::inference();
            let images = data.batch::<T>(chunk, None);
            let f = model.forward(
                &mut g,
                &images,
                &selection,
                mode == EvalMode::Similarity,
                (mode == EvalMode::Vlfm).then_some(fusion),
            )?;
            let preds = match mode {
                EvalMode::Head1 => row_argmax(g.value(f.logits1)),
                EvalMode::Similarity => similarity_predict(&mut g, f.encoded.ev, f.et.expect("text embeddings"))?,
                EvalMode::Vlfm => row_argmax(g.value(f.fusion.expect("fusion output").logits)),
            };
            let hits = f
                .encoded
                .selected
                .iter()
                .zip(chunk)
                .map(|(sel, &i)| ssvp::hit_rate(sel, &data.truth[i]))
                .collect();
            Ok((preds, hits))
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<usize> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
    let hits: Vec<f64> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
    let c = model.num_classes();
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (&p, &y) in predictions.iter().zip(&data.labels) {
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let top1 = correct.iter().sum::<usize>() as f64 / data.len() as f64;
    let per_class = correct
        .iter()
        .zip(&total)
        .map(|(&a, &n)| if n == 0 { 0.0 } else { a as f64 / n as f64 })
        .collect();
    let hit_rate = (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64);
    Ok(EvalReport {
        mode,
        top1,
        per_class,
        predictions,
        hit_rate,
    })
}

fn row_argmax<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let c = t.shape()[t.rank() - 1];
    t.data().chunks(c).map(argmax).collect()
}

/// Mean hit-rate of plain top-k selection on the `ssvp_layer` attention,
/// whether or not the variant feeds the reduced sequence onward.
pub fn selection_hit_rate<T: Scalar>(model: &Model<T>, data: &Split) -> Result<f64> {
    if data.is_empty() {
        return Err(config("cannot score selection on an empty dataset"));
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let k = model.cfg.vit.k;
    let hits: Vec<Vec<f64>> = ids
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let mut g = Graph::inference();
            let images = data.batch::<T>(chunk, None);
            let enc = model.vit.encode(&mut g, &model.store, &images, &Selection::Disabled)?;
            enc.attention
                .iter()
                .zip(chunk)
                .map(|(rec, &i)| Ok(ssvp::hit_rate(&ssvp::select_ssvp(rec, k)?.ids, &data.truth[i])))
                .collect()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = hits.concat();
    Ok(flat.iter().sum::<f64>() / flat.len() as f64)
}

/// Trains a fresh model the way its variant prescribes: stage 1, then stage 2
/// when the fusion module is used.
pub fn train_two_stage<T: Scalar>(model: &mut Model<T>, data: &Split, log: &mut LossLog) -> Result<Vec<StageReport>> {
    let mut reports = vec![train_stage1(model, data, log)?];
    if model.cfg.variant.fusion.trains_fusion() {
        reports.push(train_stage2(model, data, log)?);
    }
    Ok(reports)
}
