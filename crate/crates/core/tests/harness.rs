mod common;

use mpfgvc_core::ablation::{
    ablate, ablation_csv, sweep, sweep_csv, table_rows, AblationTable, Strategy, SweepParam,
};
use mpfgvc_core::config::{FusionMode, RunConfig};
use mpfgvc_core::data::synthesize;
use mpfgvc_core::pipeline::{train_stage1, LossLog};
use mpfgvc_core::run::{parse_values, CheckpointKind, RunDir};
use mpfgvc_core::visualize::{heatmap_pixels, load_image, mask_pixels, visualize, write_visualization};
use mpfgvc_tensor::Tensor;

fn labels(table: AblationTable) -> Vec<&'static str> {
    table_rows(table).iter().map(|r| r.label).collect()
}

#[test]
fn table_layouts() {
    assert_eq!(
        labels(AblationTable::Components),
        ["baseline", "+DaTP", "+DaTP+VLFM", "+SsVP", "+SsVP+DaTP", "full"]
    );
    let strategies = table_rows(AblationTable::Strategies);
    assert_eq!(strategies.len(), 2);
    assert!(strategies.iter().any(|r| r.strategy == Strategy::OneStage));
    assert!(strategies.iter().any(|r| r.strategy == Strategy::TwoStage));
    assert_eq!(labels(AblationTable::Prompts).len(), 4);
    assert_eq!(labels(AblationTable::VisionPrompts).len(), 3);
    assert_eq!(labels(AblationTable::Fusion).len(), 4);
    for t in AblationTable::ALL {
        assert_eq!(t.key().parse::<AblationTable>().unwrap(), t);
        for row in table_rows(t) {
            row.variant.validate().unwrap();
            assert!(row.reference_top1.is_some());
        }
    }
    assert!("8".parse::<AblationTable>().is_err());
}

#[test]
fn component_rows_toggle_one_thing_at_a_time() {
    let rows = table_rows(AblationTable::Components);
    let base = &rows[0].variant;
    assert!(!base.ssvp && !base.datp && base.fusion == FusionMode::None);
    let full = &rows[5].variant;
    assert!(full.ssvp && full.datp && full.fusion == FusionMode::Vlfm);
}

#[test]
fn sweep_grids_for_quick_geometry() {
    let cfg = RunConfig::quick();
    assert_eq!(SweepParam::K.default_grid(&cfg), [1, 2, 4, 8]);
    assert_eq!(SweepParam::J.default_grid(&cfg), [4, 8, 16, 32]);
    assert_eq!(SweepParam::Layer.default_grid(&cfg), [1, 2, 3]);
    assert_eq!(SweepParam::Layer.reference(&cfg, 3), Some(91.8));
    assert_eq!(SweepParam::K.apply(&cfg, 4).vit.k, 4);
    assert_eq!(SweepParam::J.apply(&cfg, 16).text.prompt_tokens, 16);
    for key in ["k", "J", "layer"] {
        assert_eq!(key.parse::<SweepParam>().unwrap().key(), key);
    }
    assert!("depth".parse::<SweepParam>().is_err());
}

#[test]
fn strategies_table_runs_and_formats() {
    let cfg = common::small_config(0);
    let rows = ablate(AblationTable::Strategies, &cfg, &[0, 1], None).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.per_seed.len(), 2);
        assert!((r.mean - (r.per_seed[0] + r.per_seed[1]) / 2.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.mean));
    }
    let csv = ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,mean_top1,std_top1,per_seed_top1,reference_top1");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1].split(',').nth(3).unwrap().split(';').count(), 2);
    // Re-running gives the same numbers.
    assert_eq!(ablate(AblationTable::Strategies, &cfg, &[0, 1], None).unwrap(), rows);
}

#[test]
fn fixed_dataset_replaces_per_seed_synthesis() {
    let cfg = common::small_config(0);
    let mut spec = cfg.data.clone();
    spec.seed = 3;
    let ds = synthesize(&spec).unwrap();
    let fixed = ablate(AblationTable::Strategies, &cfg, &[3], Some(&ds)).unwrap();
    let own = ablate(AblationTable::Strategies, &cfg, &[3], None).unwrap();
    assert_eq!(fixed, own);
}

#[test]
fn sweep_skips_invalid_values() {
    let cfg = common::small_config(0);
    let rows = sweep(SweepParam::K, &[1, 99], &cfg, &[0], None).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, 1);
    let csv = sweep_csv(SweepParam::K, &rows);
    assert!(csv.starts_with("param,value,top1,std_top1,per_seed_top1,reference_top1\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("k,1,"));
}

#[test]
fn run_dir_layout_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path()).unwrap();
    for sub in ["checkpoints", "logs", "results"] {
        assert!(dir.path().join(sub).is_dir());
    }
    run.write_config(&RunConfig::quick(), "train").unwrap();
    let p = run.write_result("eval", "a,b\n1,2\n", "eval").unwrap();
    assert_eq!(std::fs::read_to_string(p).unwrap(), "a,b\n1,2\n");
    let mut log = LossLog::default();
    let cfg = common::small_config(0);
    let (mut m, ds) = common::model_and_data::<f32>(&cfg);
    train_stage1(&mut m, &ds.train, &mut log).unwrap();
    run.append_losses(&log, "train").unwrap();
    run.append_losses(&log, "train").unwrap();
    let text = std::fs::read_to_string(run.loss_path()).unwrap();
    assert_eq!(text.matches("stage,step").count(), 1);
    assert_eq!(text.lines().count(), 2 * log.rows.len() + 1);
    assert!(run.find_checkpoint(&CheckpointKind::PREFERENCE).is_none());
    run.save_model(&m, CheckpointKind::Stage1, "train").unwrap();
    assert_eq!(run.find_checkpoint(&CheckpointKind::PREFERENCE).unwrap().0, CheckpointKind::Stage1);
    let files = run.manifest().unwrap().files;
    let keys: Vec<&str> = files.keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["checkpoints/stage1.bin", "config.json", "logs/loss.csv", "results/eval.csv"]
    );
    assert_eq!(files["results/eval.csv"].command, "eval");
}

#[test]
fn parse_value_lists() {
    assert_eq!(parse_values("4, 8,16").unwrap(), [4, 8, 16]);
    assert!(parse_values("4,x").is_err());
}

#[test]
fn heatmap_and_mask_pixels() {
    let heat = heatmap_pixels(&[0.0, 2.0, 1.0, 2.0], 2, 2);
    assert_eq!(heat.len(), 16);
    assert_eq!(&heat[..4], &[0, 0, 255, 255]);
    assert_eq!(heat[8], 128);
    assert!(heatmap_pixels(&[3.0; 4], 2, 1).iter().all(|&v| v == 0));
    let mask = mask_pixels(&[3], 2, 1);
    assert_eq!(mask, [0, 0, 0, 255]);
}

#[test]
fn visualization_marks_selected_cells() {
    let mut cfg = common::small_config(0);
    cfg.vit.k = 3;
    let (m, ds) = common::model_and_data::<f32>(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("in.ppm");
    mpfgvc_core::data::write_pnm(&img_path, &ds.test.pixels[0], 32, 32, 3).unwrap();
    let img: Tensor<f32> = load_image(&img_path, 32, 3).unwrap();
    let vis = visualize(&m, &img).unwrap();
    assert_eq!(vis.selected_ids.len(), 3);
    assert_eq!(vis.scores.len(), 16);
    let s = vis.s.as_ref().unwrap();
    assert_eq!(s.len(), 1 + cfg.data.classes);
    assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    assert_eq!(*vis.heatmap.iter().max().unwrap(), 255);
    assert_eq!(*vis.heatmap.iter().min().unwrap(), 0);
    // One pixel per grid cell is enough to recover the lit cells.
    let (grid, p) = (4, 8);
    let mut lit: Vec<usize> = (0..grid * grid)
        .filter(|&c| vis.mask[(c / grid) * p * 32 + (c % grid) * p] == 255)
        .collect();
    lit.sort_unstable();
    let mut ids = vis.selected_ids.clone();
    ids.sort_unstable();
    assert_eq!(lit, ids);
    assert_eq!(vis.mask.iter().filter(|&&v| v == 255).count(), 3 * p * p);

    let files = write_visualization(&dir.path().join("vis"), &vis).unwrap();
    assert_eq!(files.len(), 3);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&files[2]).unwrap()).unwrap();
    assert_eq!(json["selected_ids"].as_array().unwrap().len(), 3);
    assert!(load_image::<f32>(&img_path, 64, 3).is_err());
}
