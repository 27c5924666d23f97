//! Finite-difference suite at 64-bit: every differentiable op, the attention
//! block, the contrastive losses, the fusion module and both end-to-end
//! stage losses.

use mpfgvc_tensor::gradcheck::finite_diff_at;
use mpfgvc_tensor::{finite_diff_grad, max_relative_error, Graph, Tensor, Var, LN_EPS};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{FusionMode, RunConfig, TemplateMode};
use crate::data::synthesize;
use crate::error::Result;
use crate::model::{Labels, Model, Phase};
use crate::objectives::{loss_i2t_class, loss_i2t_pairs, loss_t2i_pairs, stage1_loss, stage2_loss, BatchEmbeddings};
use crate::vit::Selection;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per parameter tensor in the end-to-end checks.
const COORDS_PER_TENSOR: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub seeds: u64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
/// Op name, input shapes and the expression under test.
type OpCase = (&'static str, Vec<Vec<usize>>, Box<Build>);
type Composite = fn(u64) -> Result<f64>;

/// Dots `out` with fixed random weights so every output element matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn eval_inputs(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = project(&mut g, out, seed)?;
    Ok(g.value(loss).data()[0])
}

/// Worst relative error of one op over `seeds` random inputs.
pub fn check_op(name: &str, shapes: &[&[usize]], build: &Build, seeds: u64) -> Result<GradReport> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.5..1.5)))
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = project(&mut g, out, seed)?;
        g.backward(loss)?;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[i]).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
            let mut failure = None;
            let numeric = finite_diff_grad(
                |probe| {
                    let mut perturbed = inputs.clone();
                    perturbed[i] = probe.clone();
                    eval_inputs(&perturbed, build, seed).unwrap_or_else(|e| {
                        failure = Some(e);
                        f64::NAN
                    })
                },
                x,
                STEP,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            worst = worst.max(max_relative_error(&analytic, &numeric.to_f64_vec()));
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_err: worst,
        seeds,
    })
}

fn op_table() -> Vec<OpCase> {
    fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
        v.iter().map(|x| x.to_vec()).collect()
    }
    vec![
        ("matmul", s(&[&[3, 4], &[4, 2]]), Box::new(|g, v| Ok(g.matmul(v[0], v[1])?))),
        ("matmul_t", s(&[&[2, 3, 4], &[5, 4]]), Box::new(|g, v| Ok(g.matmul_t(v[0], v[1], true)?))),
        ("bmm", s(&[&[2, 3, 4], &[2, 4, 5]]), Box::new(|g, v| Ok(g.bmm(v[0], v[1], false)?))),
        ("bmm_t", s(&[&[2, 3, 4], &[2, 5, 4]]), Box::new(|g, v| Ok(g.bmm(v[0], v[1], true)?))),
        ("add", s(&[&[2, 3, 4], &[4]]), Box::new(|g, v| Ok(g.add(v[0], v[1])?))),
        ("mul", s(&[&[2, 3, 4], &[3, 4]]), Box::new(|g, v| Ok(g.mul(v[0], v[1])?))),
        ("scale", s(&[&[5]]), Box::new(|g, v| Ok(g.scale(v[0], -2.5)))),
        ("sum", s(&[&[3, 2]]), Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", s(&[&[3, 2]]), Box::new(|g, v| Ok(g.mean(v[0])))),
        ("softmax", s(&[&[3, 6]]), Box::new(|g, v| Ok(g.softmax(v[0])?))),
        (
            "layer_norm",
            s(&[&[4, 6], &[6], &[6]]),
            Box::new(|g, v| Ok(g.layer_norm(v[0], v[1], v[2], LN_EPS)?)),
        ),
        ("gelu", s(&[&[3, 5]]), Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("reshape", s(&[&[2, 6]]), Box::new(|g, v| Ok(g.reshape(v[0], &[3, 4])?))),
        ("permute", s(&[&[2, 3, 4]]), Box::new(|g, v| Ok(g.permute(v[0], &[2, 0, 1])?))),
        ("transpose", s(&[&[3, 4]]), Box::new(|g, v| Ok(g.transpose(v[0])?))),
        ("broadcast_to", s(&[&[4]]), Box::new(|g, v| Ok(g.broadcast_to(v[0], &[3, 4])?))),
        ("narrow", s(&[&[3, 5, 2]]), Box::new(|g, v| Ok(g.narrow(v[0], 1, 1, 3)?))),
        (
            "concat",
            s(&[&[2, 3, 4], &[2, 1, 4]]),
            Box::new(|g, v| Ok(g.concat(&[v[0], v[1]], 1)?)),
        ),
        (
            "gather_rows",
            s(&[&[2, 5, 3]]),
            Box::new(|g, v| Ok(g.gather_rows(v[0], &[vec![4, 0, 0], vec![1, 2, 3]])?)),
        ),
        (
            "cross_entropy",
            s(&[&[4, 3]]),
            Box::new(|g, v| Ok(g.cross_entropy(v[0], &[0, 2, 1, 2])?)),
        ),
        ("l2_normalize", s(&[&[3, 4]]), Box::new(|g, v| Ok(g.l2_normalize(v[0])?))),
        (
            "cosine_similarity",
            s(&[&[5], &[5]]),
            Box::new(|g, v| Ok(g.cosine_similarity(v[0], v[1])?)),
        ),
        (
            "loss_i2t_pairs",
            s(&[&[4, 6], &[4, 6]]),
            Box::new(|g, v| loss_i2t_pairs(g, v[0], v[1])),
        ),
        (
            "loss_t2i_pairs",
            s(&[&[4, 6], &[4, 6]]),
            Box::new(|g, v| loss_t2i_pairs(g, v[0], v[1])),
        ),
        (
            "loss_i2t_class",
            s(&[&[5, 6], &[3, 6]]),
            Box::new(|g, v| {
                let be = BatchEmbeddings {
                    v: v[0],
                    t_class: v[1],
                    labels: vec![0, 2, 1, 1, 0],
                    tau: 0.07,
                };
                loss_i2t_class(g, &be)
            }),
        ),
    ]
}

/// Smallest geometry that still exercises selection, text prompts and fusion.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::quick();
    cfg.vit.image_side = 16;
    cfg.vit.patch = 4;
    cfg.vit.dim = 8;
    cfg.vit.heads = 2;
    cfg.vit.layers = 3;
    cfg.vit.ssvp_layer = 2;
    cfg.vit.k = 3;
    cfg.text.heads = 2;
    cfg.text.layers = 1;
    cfg.text.prompt_tokens = 2;
    cfg.text.template = TemplateMode::LearnedOnly;
    cfg.data.image_side = 16;
    cfg.data.patch = 4;
    cfg.data.classes = 3;
    cfg.data.train_per_class = 2;
    cfg.data.test_per_class = 1;
    cfg.data.signal_patches = 2;
    cfg.data.seed = seed;
    cfg.train.seed = seed;
    cfg
}

type ModelLoss = dyn Fn(&Model<f64>, &mut Graph<f64>) -> Result<Var>;

/// Compares stored gradients of every parameter that received one against
/// central differences on a random subset of its coordinates.
fn check_model(model: &Model<f64>, loss: &ModelLoss, track_frozen: bool, seed: u64) -> Result<f64> {
    let mut m = model.clone();
    let mut g = Graph::new().track_frozen(track_frozen);
    let l = loss(&m, &mut g)?;
    g.backward(l)?;
    g.accumulate_param_grads(&mut m.store);
    let with_grad: Vec<_> = m
        .store
        .iter()
        .filter_map(|(id, p)| p.tensor.grad.as_ref().map(|gr| (id, gr.clone())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let mut worst: f64 = 0.0;
    for (id, grad) in with_grad {
        let x = m.store.get(id).tensor.clone();
        let n = x.numel();
        let coords = sample(&mut rng, n, COORDS_PER_TENSOR.min(n)).into_vec();
        let mut probe_model = model.clone();
        let mut failure = None;
        let numeric = finite_diff_at(
            &mut |t: &Tensor<f64>| {
                probe_model.store.get_mut(id).tensor.data_mut().copy_from_slice(t.data());
                let mut g = Graph::inference();
                match loss(&probe_model, &mut g) {
                    Ok(v) => g.value(v).data()[0],
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            &x,
            STEP,
            &coords,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let analytic: Vec<f64> = coords.iter().map(|&c| grad[c]).collect();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

struct Fixture {
    model: Model<f64>,
    images: Tensor<f64>,
    labels: Vec<usize>,
    forced: Selection,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = tiny_config(seed);
    let ds = synthesize(&cfg.data)?;
    let labels = Labels {
        supercategory: ds.meta.supercategory_name.clone(),
        class_names: ds.meta.class_names.clone(),
    };
    let model: Model<f64> = Model::new(&cfg, labels)?;
    let ids: Vec<usize> = (0..ds.train.len()).collect();
    let images = ds.train.batch::<f64>(&ids, None);
    // Selection is piecewise constant in the weights; freeze it at the
    // current choice so the loss is smooth around the probe point.
    let mut g = Graph::inference();
    let enc = model.vit.encode(&mut g, &model.store, &images, &model.selection())?;
    Ok(Fixture {
        model,
        images,
        labels: ds.train.labels.clone(),
        forced: Selection::Forced(enc.selected),
    })
}

/// Stage-1 loss `L_v + L_i2t` with respect to every image-encoder, prompt and
/// head parameter, plus (through frozen-gradient tracking) the text encoder.
pub fn check_stage1(seed: u64) -> Result<f64> {
    let mut fx = fixture(seed)?;
    fx.model.set_phase(Phase::Stage1);
    let (images, labels, forced) = (fx.images, fx.labels, fx.forced);
    let loss = move |m: &Model<f64>, g: &mut Graph<f64>| -> Result<Var> {
        let f = m.forward(g, &images, &forced, true, None)?;
        let be = BatchEmbeddings {
            v: f.encoded.ev,
            t_class: f.et.expect("text embeddings"),
            labels: labels.clone(),
            tau: m.cfg.train.tau,
        };
        Ok(stage1_loss(g, f.logits1, &be)?.total)
    };
    check_model(&fx.model, &loss, true, seed)
}

/// Stage-2 loss with respect to every fusion-module parameter.
pub fn check_stage2(seed: u64) -> Result<f64> {
    let mut fx = fixture(seed)?;
    fx.model.set_phase(Phase::Stage2);
    let (images, labels, forced) = (fx.images, fx.labels, fx.forced);
    let loss = move |m: &Model<f64>, g: &mut Graph<f64>| -> Result<Var> {
        let f = m.forward(g, &images, &forced, true, Some(FusionMode::Vlfm))?;
        stage2_loss(g, f.fusion.expect("fusion output").logits, &labels)
    };
    check_model(&fx.model, &loss, false, seed)
}

/// One transformer layer of the image encoder on a random input sequence.
pub fn check_block(seed: u64) -> Result<f64> {
    let fx = fixture(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = fx.model.cfg.vit.dim;
    let x = Tensor::from_fn(&[2, 5, d], |_| rng.random_range(-1.0..1.0));
    let mut model = fx.model;
    model.store.freeze_all(true);
    model.store.set_frozen("image_encoder.layer1.", false);
    let loss = move |m: &Model<f64>, g: &mut Graph<f64>| -> Result<Var> {
        let xv = g.constant(x.clone());
        let (out, _) = m.vit.blocks[0].forward(g, &m.store, xv)?;
        project(g, out, seed)
    };
    check_model(&model, &loss, false, seed)
}

/// Runs the whole suite over `seeds` seeds.
pub fn run_suite(seeds: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (name, shapes, build) in op_table() {
        let shapes: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        out.push(check_op(name, &shapes, build.as_ref(), seeds)?);
    }
    let composite: [(&str, Composite); 3] = [
        ("transformer_block", check_block),
        ("stage1_end_to_end", check_stage1),
        ("stage2_end_to_end", check_stage2),
    ];
    for (name, f) in composite {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            worst = worst.max(f(seed)?);
        }
        out.push(GradReport {
            name: name.to_string(),
            max_rel_err: worst,
            seeds,
        });
    }
    Ok(out)
}
