//! Multi-seed ablation tables and hyper-parameter sweeps.
//!
//! Every row trains and evaluates on the same seeds. Rows whose first stage is
//! identical share one stage-1 model per seed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{scaled_k, FusionMode, RunConfig, Selector, TemplateMode, Variant};
use crate::data::{synthesize, Dataset};
use crate::error::{config, Result};
use crate::model::{Labels, Model};
use crate::pipeline::{evaluate, train_one_stage, train_stage1, train_stage2, EvalMode, LossLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationTable {
    /// Component ablation (six rows).
    Components,
    /// Text prompt templates.
    Prompts,
    /// Vision prompt selectors.
    VisionPrompts,
    /// One-stage vs two-stage training.
    Strategies,
    /// Fusion alternatives.
    Fusion,
}

impl AblationTable {
    pub const ALL: [AblationTable; 5] = [
        AblationTable::Components,
        AblationTable::Prompts,
        AblationTable::VisionPrompts,
        AblationTable::Strategies,
        AblationTable::Fusion,
    ];

    /// Short name used on the command line and in file names.
    pub fn key(self) -> &'static str {
        match self {
            AblationTable::Components => "5",
            AblationTable::Prompts => "6",
            AblationTable::VisionPrompts => "7",
            AblationTable::Strategies => "strategies",
            AblationTable::Fusion => "appendix",
        }
    }
}

impl FromStr for AblationTable {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.key() == s)
            .ok_or_else(|| config(format!("unknown ablation table {s:?} (expected 5, 6, 7, strategies or appendix)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TwoStage,
    OneStage,
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: &'static str,
    pub variant: Variant,
    pub template: TemplateMode,
    pub strategy: Strategy,
    /// Published top-1 on CUB-200-2011, kept as metadata.
    pub reference_top1: Option<f64>,
}

impl AblationRow {
    fn new(label: &'static str, variant: Variant, reference: f64) -> Self {
        Self {
            label,
            variant,
            template: TemplateMode::LearnedOnly,
            strategy: Strategy::TwoStage,
            reference_top1: Some(reference),
        }
    }

    fn eval_mode(&self) -> EvalMode {
        EvalMode::for_fusion(self.variant.fusion)
    }
}

fn variant(ssvp: bool, datp: bool, fusion: FusionMode) -> Variant {
    Variant {
        ssvp,
        selector: Selector::Ssvp,
        datp,
        fusion,
    }
}

pub fn table_rows(table: AblationTable) -> Vec<AblationRow> {
    use FusionMode::{None as NoFusion, SelfAttentionOnly, Similarity, Vlfm};
    match table {
        AblationTable::Components => vec![
            AblationRow::new("baseline", variant(false, false, NoFusion), 90.8),
            AblationRow::new("+DaTP", variant(false, true, NoFusion), 91.3),
            AblationRow::new("+DaTP+VLFM", variant(false, true, Vlfm), 91.5),
            AblationRow::new("+SsVP", variant(true, false, NoFusion), 91.2),
            AblationRow::new("+SsVP+DaTP", variant(true, true, NoFusion), 91.5),
            AblationRow::new("full", Variant::full(), 91.8),
        ],
        AblationTable::Prompts => [
            (TemplateMode::Handcrafted, 91.5),
            (TemplateMode::SubcategoryName, 91.7),
            (TemplateMode::PrefixPhoto, 91.8),
            (TemplateMode::LearnedOnly, 91.8),
        ]
        .into_iter()
        .map(|(t, r)| AblationRow {
            template: t,
            ..AblationRow::new(t.label(), Variant::full(), r)
        })
        .collect(),
        AblationTable::VisionPrompts => [
            (Selector::PsmLike, 91.4),
            (Selector::MhvmLike, 91.2),
            (Selector::Ssvp, 91.8),
        ]
        .into_iter()
        .map(|(s, r)| {
            AblationRow::new(
                s.label(),
                Variant {
                    selector: s,
                    ..Variant::full()
                },
                r,
            )
        })
        .collect(),
        AblationTable::Strategies => vec![
            AblationRow {
                strategy: Strategy::OneStage,
                ..AblationRow::new("one-stage", Variant::full(), 91.1)
            },
            AblationRow::new("two-stage", Variant::full(), 91.8),
        ],
        AblationTable::Fusion => vec![
            AblationRow::new("similarity", variant(true, true, Similarity), 90.9),
            AblationRow::new("without VLFM", variant(true, true, NoFusion), 91.5),
            AblationRow::new("self-attention", variant(true, true, SelfAttentionOnly), 91.5),
            AblationRow::new("cross-attention", Variant::full(), 91.8),
        ],
    }
}

/// Aggregated test accuracy of one row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowResult {
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub reference_top1: Option<f64>,
}

impl RowResult {
    fn new(label: impl Into<String>, per_seed: Vec<f64>, reference_top1: Option<f64>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            label: label.into(),
            per_seed,
            mean,
            std: var.sqrt(),
            reference_top1,
        }
    }
}

/// Config and data of one seed. A fixed dataset is reused for every seed;
/// otherwise each seed synthesises its own.
fn seeded(base: &RunConfig, seed: u64, fixed: Option<&Dataset>) -> Result<(RunConfig, Dataset)> {
    let mut cfg = base.clone();
    cfg.train.seed = seed;
    let ds = match fixed {
        Some(ds) => ds.clone(),
        None => {
            cfg.data.seed = seed;
            synthesize(&cfg.data)?
        }
    };
    Ok((cfg, ds))
}

fn labels(ds: &Dataset) -> Labels {
    Labels {
        supercategory: ds.meta.supercategory_name.clone(),
        class_names: ds.meta.class_names.clone(),
    }
}

/// Everything stage 1 depends on.
fn stage1_key(row: &AblationRow) -> String {
    let v = &row.variant;
    format!("{}-{:?}-{}-{:?}", v.ssvp, v.selector, v.datp, row.template)
}

/// Test accuracy of every row for one seed.
fn run_seed(rows: &[AblationRow], base: &RunConfig, seed: u64, fixed: Option<&Dataset>) -> Result<Vec<f64>> {
    let (cfg, ds) = seeded(base, seed, fixed)?;
    let mut stage1: HashMap<String, Model<f32>> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut rc = cfg.clone();
        rc.variant = row.variant.clone();
        rc.text.template = row.template;
        rc.validate()?;
        let mut log = LossLog::default();
        let model = match row.strategy {
            Strategy::OneStage => {
                let mut m: Model<f32> = Model::new(&rc, labels(&ds))?;
                train_one_stage(&mut m, &ds.train, &mut log)?;
                m
            }
            Strategy::TwoStage => {
                let key = stage1_key(row);
                let mut m = match stage1.get(&key) {
                    Some(m) => m.clone(),
                    None => {
                        let mut m: Model<f32> = Model::new(&rc, labels(&ds))?;
                        train_stage1(&mut m, &ds.train, &mut log)?;
                        stage1.insert(key, m.clone());
                        m
                    }
                };
                m.cfg.variant = row.variant.clone();
                if row.variant.fusion.trains_fusion() {
                    train_stage2(&mut m, &ds.train, &mut log)?;
                }
                m
            }
        };
        let report = evaluate(&model, &ds.test, row.eval_mode())?;
        log::info!("seed {seed} {}: top1 {:.4}", row.label, report.top1);
        out.push(report.top1);
    }
    Ok(out)
}

/// Trains and evaluates every row of `table` on each seed.
pub fn ablate(table: AblationTable, base: &RunConfig, seeds: &[u64], fixed: Option<&Dataset>) -> Result<Vec<RowResult>> {
    let rows = table_rows(table);
    let per_seed: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&s| run_seed(&rows, base, s, fixed))
        .collect::<Result<_>>()?;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            RowResult::new(
                row.label,
                per_seed.iter().map(|s| s[i]).collect(),
                row.reference_top1,
            )
        })
        .collect())
}

fn fmt_seeds(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";")
}

fn fmt_ref(r: Option<f64>) -> String {
    r.map(|x| format!("{x:.1}")).unwrap_or_default()
}

pub fn ablation_csv(rows: &[RowResult]) -> String {
    let mut s = String::from("row,mean_top1,std_top1,per_seed_top1,reference_top1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{}",
            r.label,
            r.mean,
            r.std,
            fmt_seeds(&r.per_seed),
            fmt_ref(r.reference_top1)
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepParam {
    /// Retained patch tokens.
    #[serde(rename = "k")]
    K,
    /// Learnable prompt tokens per class.
    #[serde(rename = "J")]
    J,
    /// Layer whose attention drives the selection.
    #[serde(rename = "layer")]
    Layer,
}

impl FromStr for SweepParam {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepParam::K),
            "J" | "j" => Ok(SweepParam::J),
            "layer" => Ok(SweepParam::Layer),
            _ => Err(config(format!("unknown sweep parameter {s:?} (expected k, J or layer)"))),
        }
    }
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::J => "J",
            SweepParam::Layer => "layer",
        }
    }

    /// Default grid for `cfg`. `k` doubles from 1 up to half the patch count
    /// and always includes the default operating point; `layer` covers the
    /// last three insertion points before the final layer.
    pub fn default_grid(self, cfg: &RunConfig) -> Vec<usize> {
        match self {
            SweepParam::K => {
                let n = cfg.vit.num_patches();
                let mut v: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2))
                    .take_while(|&k| k <= (n / 2).max(1))
                    .collect();
                v.push(scaled_k(n));
                v.sort_unstable();
                v.dedup();
                v
            }
            SweepParam::J => vec![4, 8, 16, 32],
            SweepParam::Layer => {
                let l = cfg.vit.layers;
                (1..=3).rev().filter(|d| l > *d).map(|d| l - d).collect()
            }
        }
    }

    /// `cfg` with the swept value applied.
    pub fn apply(self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            SweepParam::K => c.vit.k = value,
            SweepParam::J => c.text.prompt_tokens = value,
            SweepParam::Layer => c.vit.ssvp_layer = value,
        }
        c
    }

    /// Published CUB-200-2011 value of a grid point, where one exists.
    pub fn reference(self, cfg: &RunConfig, value: usize) -> Option<f64> {
        match self {
            SweepParam::Layer => match cfg.vit.layers.checked_sub(value)? {
                3 => Some(90.0),
                2 => Some(91.0),
                1 => Some(91.8),
                _ => None,
            },
            _ => None,
        }
    }
}

/// One train-and-evaluate per valid value on each seed. Invalid values are
/// skipped with a warning.
pub fn sweep(
    param: SweepParam,
    values: &[usize],
    base: &RunConfig,
    seeds: &[u64],
    fixed: Option<&Dataset>,
) -> Result<Vec<(usize, RowResult)>> {
    let mut out = Vec::new();
    for &value in values {
        let cfg = param.apply(base, value);
        if let Err(e) = cfg.validate() {
            log::warn!("skipping {}={value}: {e}", param.key());
            continue;
        }
        let row = AblationRow {
            label: "",
            variant: cfg.variant.clone(),
            template: cfg.text.template,
            strategy: Strategy::TwoStage,
            reference_top1: None,
        };
        let accs: Vec<f64> = seeds
            .par_iter()
            .map(|&s| run_seed(std::slice::from_ref(&row), &cfg, s, fixed).map(|v| v[0]))
            .collect::<Result<_>>()?;
        out.push((
            value,
            RowResult::new(format!("{}={value}", param.key()), accs, param.reference(base, value)),
        ));
    }
    Ok(out)
}

pub fn sweep_csv(param: SweepParam, rows: &[(usize, RowResult)]) -> String {
    let mut s = String::from("param,value,top1,std_top1,per_seed_top1,reference_top1\n");
    for (v, r) in rows {
        let _ = writeln!(
            s,
            "{},{v},{:.6},{:.6},{},{}",
            param.key(),
            r.mean,
            r.std,
            fmt_seeds(&r.per_seed),
            fmt_ref(r.reference_top1)
        );
    }
    s
}
