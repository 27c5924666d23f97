#![allow(dead_code)]

use mpfgvc_core::config::RunConfig;
use mpfgvc_core::data::{synthesize, Dataset};
use mpfgvc_core::model::{Labels, Model};
use mpfgvc_tensor::Scalar;

/// Quick geometry with a short schedule and a small dataset.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::quick();
    cfg.data.classes = 4;
    cfg.data.train_per_class = 6;
    cfg.data.test_per_class = 3;
    cfg.train.epochs_stage1 = 2;
    cfg.train.epochs_stage2 = 2;
    cfg.train.warmup_epochs = 0;
    cfg.train.seed = seed;
    cfg.data.seed = seed;
    cfg
}

pub fn labels(ds: &Dataset) -> Labels {
    Labels {
        supercategory: ds.meta.supercategory_name.clone(),
        class_names: ds.meta.class_names.clone(),
    }
}

pub fn model_and_data<T: Scalar>(cfg: &RunConfig) -> (Model<T>, Dataset) {
    let ds = synthesize(&cfg.data).unwrap();
    let m = Model::new(cfg, labels(&ds)).unwrap();
    (m, ds)
}
