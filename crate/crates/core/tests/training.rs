mod common;

use mpfgvc_core::config::{FusionMode, Variant};
use mpfgvc_core::model::{Model, Phase, GROUPS, HEAD1, IMAGE_ENCODER, PROMPT, TEXT_ENCODER, VLFM};
use mpfgvc_core::pipeline::{
    evaluate, selection_hit_rate, train_one_stage, train_stage1, train_stage2, train_two_stage, EvalMode, LossLog,
};
use mpfgvc_core::run::{load_model, CheckpointKind, RunDir};

fn snapshots(m: &Model<f32>) -> Vec<Vec<(String, Vec<f32>)>> {
    GROUPS.iter().map(|g| m.snapshot(g)).collect()
}

fn group_index(group: &str) -> usize {
    GROUPS.iter().position(|g| *g == group).unwrap()
}

#[test]
fn stage1_leaves_text_encoder_untouched() {
    let cfg = common::small_config(0);
    let (mut m, ds) = common::model_and_data::<f32>(&cfg);
    let before = snapshots(&m);
    train_stage1(&mut m, &ds.train, &mut LossLog::default()).unwrap();
    let after = snapshots(&m);
    assert_eq!(before[group_index(TEXT_ENCODER)], after[group_index(TEXT_ENCODER)]);
    assert_eq!(before[group_index(VLFM)], after[group_index(VLFM)]);
    for g in [IMAGE_ENCODER, PROMPT, HEAD1] {
        assert_ne!(before[group_index(g)], after[group_index(g)], "{g} did not train");
    }
}

#[test]
fn stage2_only_updates_fusion_module() {
    let cfg = common::small_config(1);
    let (mut m, ds) = common::model_and_data::<f32>(&cfg);
    train_stage1(&mut m, &ds.train, &mut LossLog::default()).unwrap();
    let before = snapshots(&m);
    train_stage2(&mut m, &ds.train, &mut LossLog::default()).unwrap();
    let after = snapshots(&m);
    for g in [IMAGE_ENCODER, TEXT_ENCODER, PROMPT, HEAD1] {
        assert_eq!(before[group_index(g)], after[group_index(g)], "{g} changed in stage 2");
    }
    assert_ne!(before[group_index(VLFM)], after[group_index(VLFM)]);
}

#[test]
fn prompts_stay_fixed_without_text_prompt() {
    let mut cfg = common::small_config(2);
    cfg.variant = Variant::baseline();
    let (mut m, ds) = common::model_and_data::<f32>(&cfg);
    let before = m.snapshot(PROMPT);
    let log = &mut LossLog::default();
    train_stage1(&mut m, &ds.train, log).unwrap();
    assert_eq!(before, m.snapshot(PROMPT));
    assert!(log.rows.iter().all(|r| r.l_i2t.is_none()));
}

#[test]
fn one_stage_keeps_text_encoder_frozen() {
    let cfg = common::small_config(3);
    let (mut m, ds) = common::model_and_data::<f32>(&cfg);
    let before = m.snapshot(TEXT_ENCODER);
    let vlfm = m.snapshot(VLFM);
    train_one_stage(&mut m, &ds.train, &mut LossLog::default()).unwrap();
    assert_eq!(before, m.snapshot(TEXT_ENCODER));
    assert_ne!(vlfm, m.snapshot(VLFM));
}

#[test]
fn phases_freeze_the_right_groups() {
    let cfg = common::small_config(0);
    let (mut m, _) = common::model_and_data::<f32>(&cfg);
    m.set_phase(Phase::Stage2);
    for (_, p) in m.store.iter() {
        assert_eq!(p.frozen, !p.name.starts_with(VLFM), "{}", p.name);
    }
    m.set_phase(Phase::Frozen);
    assert!(m.store.iter().all(|(_, p)| p.frozen));
}

#[test]
fn training_is_deterministic() {
    let cfg = common::small_config(4);
    let run = || {
        let (mut m, ds) = common::model_and_data::<f32>(&cfg);
        let mut log = LossLog::default();
        train_two_stage(&mut m, &ds.train, &mut log).unwrap();
        let r = evaluate(&m, &ds.test, EvalMode::Vlfm).unwrap();
        (log, snapshots(&m), r)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_csv(), b.0.to_csv());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);

    let mut other = cfg.clone();
    other.train.seed = 5;
    let (mut m, ds) = common::model_and_data::<f32>(&other);
    let mut log = LossLog::default();
    train_stage1(&mut m, &ds.train, &mut log).unwrap();
    assert_ne!(log.to_csv(), a.0.to_csv());
}

#[test]
fn text_encoder_does_not_depend_on_run_seed() {
    let (a, _) = common::model_and_data::<f32>(&common::small_config(0));
    let (b, _) = common::model_and_data::<f32>(&common::small_config(9));
    assert_eq!(a.snapshot(TEXT_ENCODER), b.snapshot(TEXT_ENCODER));
    assert_ne!(a.snapshot(IMAGE_ENCODER), b.snapshot(IMAGE_ENCODER));
}

#[test]
fn stage2_reduces_its_loss() {
    let mut cfg = common::small_config(6);
    cfg.train.epochs_stage1 = 4;
    cfg.train.epochs_stage2 = 6;
    let (mut m, ds) = common::model_and_data::<f32>(&cfg);
    train_stage1(&mut m, &ds.train, &mut LossLog::default()).unwrap();
    let r = train_stage2(&mut m, &ds.train, &mut LossLog::default()).unwrap();
    assert_eq!(r.epoch_losses.len(), 6);
    assert!(r.last_loss() <= r.first_loss(), "{:?}", r.epoch_losses);
}

#[test]
fn loss_log_records_every_step() {
    let cfg = common::small_config(7);
    let (mut m, ds) = common::model_and_data::<f32>(&cfg);
    let mut log = LossLog::default();
    let r1 = train_stage1(&mut m, &ds.train, &mut log).unwrap();
    let r2 = train_stage2(&mut m, &ds.train, &mut log).unwrap();
    assert_eq!(log.rows.len(), r1.steps + r2.steps);
    let per_epoch = ds.train.len().div_ceil(cfg.train.batch_size);
    assert_eq!(r1.steps, per_epoch * cfg.train.epochs_stage1);
    for row in &log.rows {
        assert!(row.l_stage.is_finite() && row.lr >= 0.0);
        if row.stage == "stage1" {
            let sum = row.l_v.unwrap() + row.l_i2t.unwrap();
            assert!((row.l_stage - sum).abs() <= 1e-5 * sum.abs().max(1.0));
        }
    }
    let csv = log.to_csv();
    assert!(csv.starts_with(LossLog::HEADER));
    assert_eq!(csv.lines().count(), log.rows.len() + 1);
}

#[test]
fn evaluation_errors_and_chance_level() {
    let mut cfg = common::small_config(8);
    cfg.data.test_per_class = 25;
    let (m, ds) = common::model_and_data::<f32>(&cfg);
    let mut empty = ds.test.clone();
    empty.pixels.clear();
    empty.labels.clear();
    empty.truth.clear();
    assert!(evaluate(&m, &empty, EvalMode::Head1).is_err());
    assert!(selection_hit_rate(&m, &empty).is_err());

    let r = evaluate(&m, &ds.test, EvalMode::Head1).unwrap();
    assert_eq!(r.predictions.len(), ds.test.len());
    assert_eq!(r.per_class.len(), 4);
    // An untrained model sits near chance (0.25 for four classes).
    assert!(r.top1 < 0.6, "untrained top1 {}", r.top1);

    let mut no_fusion = cfg.clone();
    no_fusion.variant.fusion = FusionMode::None;
    let (m, ds) = common::model_and_data::<f32>(&no_fusion);
    assert!(evaluate(&m, &ds.test, EvalMode::Vlfm).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = common::small_config(10);
    let (mut m, ds) = common::model_and_data::<f32>(&cfg);
    train_two_stage(&mut m, &ds.train, &mut LossLog::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path()).unwrap();
    let path = run.save_model(&m, CheckpointKind::Stage2, "test").unwrap();
    let back: Model<f32> = load_model(&path).unwrap();
    assert_eq!(snapshots(&back), snapshots(&m));
    assert_eq!(
        evaluate(&back, &ds.test, EvalMode::Vlfm).unwrap(),
        evaluate(&m, &ds.test, EvalMode::Vlfm).unwrap()
    );
    assert!(run.manifest().unwrap().files.contains_key("checkpoints/stage2.bin"));
    assert!(load_model::<f32>(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn f64_model_trains_too() {
    let mut cfg = common::small_config(11);
    cfg.train.epochs_stage1 = 1;
    let (mut m, ds) = common::model_and_data::<f64>(&cfg);
    let r = train_stage1(&mut m, &ds.train, &mut LossLog::default()).unwrap();
    assert!(r.last_loss().is_finite());
}
