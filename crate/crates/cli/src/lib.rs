//! `mpfgvc` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 on bad
//! flags.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mpfgvc_core::ablation::{ablate, ablation_csv, sweep, sweep_csv, AblationTable, SweepParam};
use mpfgvc_core::config::{Precision, RunConfig};
use mpfgvc_core::data::{generate_dataset, synthesize, Dataset};
use mpfgvc_core::gradcheck::{run_suite, TOLERANCE};
use mpfgvc_core::model::{Labels, Model};
use mpfgvc_core::pipeline::{evaluate, train_one_stage, train_stage1, train_stage2, EvalMode, LossLog, StageReport};
use mpfgvc_core::run::{load_model, parse_values, CheckpointKind, RunDir};
use mpfgvc_core::visualize::{load_image, visualize, write_visualization};
use mpfgvc_core::{Error, Result};
use mpfgvc_tensor::Scalar;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mpfgvc", version, about = "Multimodal prompting for fine-grained visual classification")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no `--config` is given.
    #[arg(long, global = true, value_enum, default_value = "default")]
    pub preset: PresetArg,
    /// Seed for model initialisation, shuffling and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory (written by gen-data, read by everything else).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    /// 64px images, 64 patches, 6-layer encoder.
    Default,
    /// 32px images, 16 patches; trains in seconds.
    Quick,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "one")]
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Head1,
    Similarity,
    Vlfm,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Head1 => EvalMode::Head1,
            ModeArg::Similarity => EvalMode::Similarity,
            ModeArg::Vlfm => EvalMode::Vlfm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenData,
    /// Train one stage; stage 2 continues from the run's stage-1 checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Top-1 accuracy of the run's latest checkpoint (an untrained model if
    /// there is none).
    Eval {
        #[arg(long, value_enum, default_value = "head1")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Multi-seed ablation table.
    Ablate {
        #[arg(long, value_parser = ["5", "6", "7", "strategies", "appendix"])]
        table: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Hyper-parameter sweep.
    Sweep {
        #[arg(long, value_parser = ["k", "J", "layer"])]
        param: String,
        /// Comma-separated grid; defaults to the parameter's standard grid.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Finite-difference gradient suite; fails if any error exceeds 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Attention heatmap, selection mask and selection JSON for one image.
    Visualize {
        #[arg(long)]
        image: PathBuf,
        /// Defaults to the run's latest checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Caps rayon workers at `MPFGVC_THREADS` (once per process).
fn configure_threads() {
    if let Some(n) = std::env::var("MPFGVC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => match cli.preset {
            PresetArg::Default => RunConfig::default(),
            PresetArg::Quick => RunConfig::quick(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(d) = &cli.data {
        cfg.data_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig) -> Result<RunDir> {
    RunDir::create(cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("run")))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Sweep { .. } => "sweep",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Visualize { .. } => "visualize",
    }
}

/// The configured dataset directory if it holds a dataset, otherwise data
/// synthesised from the config.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) if dir.join("meta.json").exists() => Dataset::load(dir),
        _ => synthesize(&cfg.data),
    }
}

fn fixed_data(cfg: &RunConfig) -> Result<Option<Dataset>> {
    match &cfg.data_dir {
        Some(dir) if dir.join("meta.json").exists() => Ok(Some(Dataset::load(dir)?)),
        _ => Ok(None),
    }
}

fn labels(ds: &Dataset) -> Labels {
    Labels {
        supercategory: ds.meta.supercategory_name.clone(),
        class_names: ds.meta.class_names.clone(),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    Ok(parse_values(s)?.into_iter().map(|v| v as u64).collect())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let name = command_name(&cli.command);
    match &cli.command {
        Command::GenData => gen_data(&cfg, name),
        Command::Train { stage } => match cfg.precision {
            Precision::F32 => train::<f32>(&cfg, *stage, name),
            Precision::F64 => train::<f64>(&cfg, *stage, name),
        },
        Command::Eval { mode, split } => match cfg.precision {
            Precision::F32 => eval::<f32>(&cfg, (*mode).into(), *split, name),
            Precision::F64 => eval::<f64>(&cfg, (*mode).into(), *split, name),
        },
        Command::Ablate { table, seeds } => {
            let table: AblationTable = table.parse()?;
            let rows = ablate(table, &cfg, &parse_seeds(seeds)?, fixed_data(&cfg)?.as_ref())?;
            let csv = ablation_csv(&rows);
            let dir = run_dir(&cfg)?;
            dir.write_config(&cfg, name)?;
            dir.write_result(&format!("ablation_{}", table.key()), &csv, name)?;
            print!("{csv}");
            Ok(())
        }
        Command::Sweep { param, values, seeds } => {
            let param: SweepParam = param.parse()?;
            let grid = match values {
                Some(v) => parse_values(v)?,
                None => param.default_grid(&cfg),
            };
            let rows = sweep(param, &grid, &cfg, &parse_seeds(seeds)?, fixed_data(&cfg)?.as_ref())?;
            let csv = sweep_csv(param, &rows);
            let dir = run_dir(&cfg)?;
            dir.write_config(&cfg, name)?;
            dir.write_result(&format!("sweep_{}", param.key()), &csv, name)?;
            print!("{csv}");
            Ok(())
        }
        Command::Gradcheck { seeds } => gradcheck(&cfg, *seeds, name),
        Command::Visualize { image, checkpoint } => match cfg.precision {
            Precision::F32 => visualize_cmd::<f32>(&cfg, image, checkpoint.as_deref(), name),
            Precision::F64 => visualize_cmd::<f64>(&cfg, image, checkpoint.as_deref(), name),
        },
    }
}

fn gen_data(cfg: &RunConfig, name: &str) -> Result<()> {
    let dir = run_dir(cfg)?;
    let target = cfg.data_dir.clone().unwrap_or_else(|| dir.root().join("data"));
    let ds = generate_dataset(&cfg.data, &target)?;
    dir.write_config(cfg, name)?;
    dir.record(&target.join("meta.json"), "dataset", name)?;
    println!(
        "wrote {} train and {} test images to {}",
        ds.train.len(),
        ds.test.len(),
        target.display()
    );
    Ok(())
}

fn stage_csv(reports: &[StageReport]) -> String {
    let mut s = String::from("stage,epoch,mean_loss\n");
    for r in reports {
        for (e, l) in r.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "{},{},{l:.9e}", r.stage, e + 1);
        }
    }
    s
}

fn train<T: Scalar>(cfg: &RunConfig, stage: StageArg, name: &str) -> Result<()> {
    let dir = run_dir(cfg)?;
    let ds = load_data(cfg)?;
    let mut log = LossLog::default();
    let (model, report, kind) = match stage {
        StageArg::One => {
            let mut m: Model<T> = Model::new(cfg, labels(&ds))?;
            let r = train_stage1(&mut m, &ds.train, &mut log)?;
            (m, r, CheckpointKind::Stage1)
        }
        StageArg::Two => {
            let ckpt = dir.checkpoint_path(CheckpointKind::Stage1);
            if !ckpt.exists() {
                return Err(Error::Config(format!(
                    "stage 2 needs a stage-1 checkpoint, but {} does not exist; run `train --stage 1` first",
                    ckpt.display()
                )));
            }
            let mut m: Model<T> = load_model(&ckpt)?;
            m.cfg.train = cfg.train.clone();
            let r = train_stage2(&mut m, &ds.train, &mut log)?;
            (m, r, CheckpointKind::Stage2)
        }
        StageArg::Joint => {
            let mut m: Model<T> = Model::new(cfg, labels(&ds))?;
            let r = train_one_stage(&mut m, &ds.train, &mut log)?;
            (m, r, CheckpointKind::OneStage)
        }
    };
    dir.write_config(&model.cfg, name)?;
    let ckpt = dir.save_model(&model, kind, name)?;
    dir.append_losses(&log, name)?;
    dir.write_result(&format!("train_{}", report.stage), &stage_csv(std::slice::from_ref(&report)), name)?;
    println!(
        "{}: {} steps, loss {:.4} -> {:.4}; checkpoint {}",
        report.stage,
        report.steps,
        report.first_loss(),
        report.last_loss(),
        ckpt.display()
    );
    Ok(())
}

fn eval<T: Scalar>(cfg: &RunConfig, mode: EvalMode, split: SplitArg, name: &str) -> Result<()> {
    let dir = run_dir(cfg)?;
    let ds = load_data(cfg)?;
    let kinds: &[CheckpointKind] = if mode == EvalMode::Vlfm {
        &[CheckpointKind::Stage2, CheckpointKind::OneStage]
    } else {
        &CheckpointKind::PREFERENCE
    };
    let model: Model<T> = match dir.find_checkpoint(kinds) {
        Some((_, p)) => load_model(&p)?,
        None => {
            log::warn!("no checkpoint in {}; evaluating an untrained model", dir.root().display());
            Model::new(cfg, labels(&ds))?
        }
    };
    let (split_name, data) = match split {
        SplitArg::Train => ("train", &ds.train),
        SplitArg::Test => ("test", &ds.test),
    };
    let r = evaluate(&model, data, mode)?;
    let mode_key = match mode {
        EvalMode::Head1 => "head1",
        EvalMode::Similarity => "similarity",
        EvalMode::Vlfm => "vlfm",
    };
    let hit = r.hit_rate.map(|h| format!("{h:.6}")).unwrap_or_default();
    let mut csv = String::from("mode,split,top1,hit_rate\n");
    let _ = writeln!(csv, "{mode_key},{split_name},{:.6},{hit}", r.top1);
    dir.write_result(&format!("eval_{mode_key}_{split_name}"), &csv, name)?;
    let mut per_class = String::from("class,top1\n");
    for (c, a) in r.per_class.iter().enumerate() {
        let _ = writeln!(per_class, "{},{a:.6}", model.labels.class_names[c]);
    }
    dir.write_result(&format!("eval_{mode_key}_{split_name}_per_class"), &per_class, name)?;
    println!("{mode_key} {split_name} top1 {:.4}", r.top1);
    Ok(())
}

fn gradcheck(cfg: &RunConfig, seeds: u64, name: &str) -> Result<()> {
    let reports = run_suite(seeds)?;
    let mut csv = String::from("op,max_rel_err,seeds,passed\n");
    for r in &reports {
        println!(
            "{:<22} {:.3e} {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        let _ = writeln!(csv, "{},{:.6e},{},{}", r.name, r.max_rel_err, r.seeds, r.passed());
    }
    let dir = run_dir(cfg)?;
    dir.write_result("gradcheck", &csv, name)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient check above {TOLERANCE:e} for: {}",
            failed.join(", ")
        )))
    }
}

fn visualize_cmd<T: Scalar>(cfg: &RunConfig, image: &Path, checkpoint: Option<&Path>, name: &str) -> Result<()> {
    let dir = run_dir(cfg)?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => dir
            .find_checkpoint(&CheckpointKind::PREFERENCE)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Io {
                path: dir.root().join("checkpoints"),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint to visualize"),
            })?,
    };
    let model: Model<T> = load_model(&ckpt)?;
    let vc = &model.cfg.vit;
    let img = load_image::<T>(image, vc.image_side, vc.channels)?;
    let vis = visualize(&model, &img)?;
    let files = write_visualization(&dir.root().join("visualize"), &vis)?;
    for f in &files {
        dir.record(f, "visualization", name)?;
    }
    println!("selected patches {:?}", vis.selected_ids);
    Ok(())
}
