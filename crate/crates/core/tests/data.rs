use std::fs;

use mpfgvc_core::config::SynthConfig;
use mpfgvc_core::data::{
    decode_pnm, encode_pnm, generate_dataset, image_path, nearest_mean_accuracy, synthesize, Dataset,
};
use mpfgvc_core::Error;
use proptest::prelude::*;

fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        classes: 3,
        train_per_class: 4,
        test_per_class: 2,
        image_side: 16,
        patch: 4,
        signal_patches: 2,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn pinned_dataset_shape() {
    let ds = synthesize(&SynthConfig::default()).unwrap();
    assert_eq!(ds.meta.num_classes, 8);
    assert_eq!(ds.train.len(), 200);
    assert_eq!(ds.test.len(), 80);
    assert!(ds.train.labels_balanced(8) && ds.test.labels_balanced(8));
    assert_eq!(ds.train.pixels[0].len(), 64 * 64 * 3);
    for cells in ds.train.truth.iter().chain(&ds.test.truth) {
        assert_eq!(cells.len(), 4);
        assert!(cells.windows(2).all(|w| w[0] < w[1]));
        assert!(cells.iter().all(|&c| c < 64));
    }
}

#[test]
fn generation_is_pure_in_the_seed() {
    let a = synthesize(&tiny_synth(5)).unwrap();
    let b = synthesize(&tiny_synth(5)).unwrap();
    let c = synthesize(&tiny_synth(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.train.pixels, c.train.pixels);
}

#[test]
fn planted_patches_carry_the_class_pattern() {
    let synth = SynthConfig {
        noise: 0.0,
        ..tiny_synth(2)
    };
    let ds = synthesize(&synth).unwrap();
    let (side, p, ch) = (synth.image_side, synth.patch, synth.channels);
    let grid = side / p;
    let cell = |img: &[u8], c: usize| -> Vec<u8> {
        let (gy, gx) = (c / grid, c % grid);
        let mut out = Vec::new();
        for dy in 0..p {
            let row = ((gy * p + dy) * side + gx * p) * ch;
            out.extend_from_slice(&img[row..row + p * ch]);
        }
        out
    };
    // Without noise every stamped cell of a class holds the same pixels.
    let split = &ds.train;
    for i in 0..split.len() {
        for j in 0..split.len() {
            if split.labels[i] == split.labels[j] {
                assert_eq!(cell(&split.pixels[i], split.truth[i][0]), cell(&split.pixels[j], split.truth[j][1]));
            }
        }
    }
}

#[test]
fn disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&tiny_synth(1), dir.path()).unwrap();
    assert!(image_path(dir.path(), "train", 2, 3, 3).exists());
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn grayscale_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        channels: 1,
        ..tiny_synth(3)
    };
    let ds = generate_dataset(&synth, dir.path()).unwrap();
    assert!(image_path(dir.path(), "test", 0, 1, 1).extension().unwrap() == "pgm");
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn load_reports_missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
    generate_dataset(&tiny_synth(1), dir.path()).unwrap();
    let img = image_path(dir.path(), "train", 1, 0, 3);
    fs::write(&img, b"P6\n16 16\n255\nshort").unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    fs::remove_file(&img).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
    fs::write(dir.path().join("meta.json"), "{not json").unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn load_rejects_wrong_image_size() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&tiny_synth(1), dir.path()).unwrap();
    let img = image_path(dir.path(), "test", 0, 0, 3);
    fs::write(&img, encode_pnm(&[0; 8 * 8 * 3], 8, 8, 3)).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn pnm_header_variants() {
    assert_eq!(decode_pnm(b"P5 2 1 255\n\x01\x02").unwrap(), (2, 1, 1, vec![1, 2]));
    assert_eq!(decode_pnm(b"P5\n# comment\n1 1\n255\n\x07").unwrap(), (1, 1, 1, vec![7]));
    assert!(decode_pnm(b"P3\n1 1\n255\n0").is_err());
    assert!(decode_pnm(b"P5\n1 1\n65535\n\0\0").is_err());
    assert!(decode_pnm(b"P5\n1").is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(synthesize(&SynthConfig { patch: 5, ..tiny_synth(0) }).is_err());
    assert!(synthesize(&SynthConfig { signal_patches: 17, ..tiny_synth(0) }).is_err());
    assert!(synthesize(&SynthConfig { noise: -1.0, ..tiny_synth(0) }).is_err());
}

#[test]
fn nearest_mean_oracle_separates_classes_with_many_planted_patches() {
    let synth = SynthConfig {
        signal_patches: 16,
        noise: 0.1,
        ..SynthConfig::default()
    };
    let ds = synthesize(&synth).unwrap();
    let acc = nearest_mean_accuracy(&ds.train, &ds.test, synth.classes).unwrap();
    assert!(acc >= 0.9, "nearest-mean accuracy {acc}");
}

#[test]
fn nearest_mean_needs_data() {
    let ds = synthesize(&tiny_synth(0)).unwrap();
    let mut empty = ds.test.clone();
    empty.pixels.clear();
    empty.labels.clear();
    empty.truth.clear();
    assert!(nearest_mean_accuracy(&ds.train, &empty, 3).is_err());
}

proptest! {
    #[test]
    fn pnm_encode_decode(w in 1usize..6, h in 1usize..6, gray in any::<bool>(), seed in any::<u8>()) {
        let ch = if gray { 1 } else { 3 };
        let px: Vec<u8> = (0..w * h * ch).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        prop_assert_eq!(decode_pnm(&encode_pnm(&px, w, h, ch)).unwrap(), (w, h, ch, px));
    }
}
