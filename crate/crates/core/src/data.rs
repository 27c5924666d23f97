//! Synthetic fine-grained images and the on-disk dataset layout.
//!
//! Every image shares a procedural sinusoidal background; the label lives only
//! in a small patch-aligned pattern stamped into `s` random cells. The stamped
//! cells are recorded so token selection can be scored against them.
//!
//! Layout: `root/meta.json`, `root/{train,test}/class_<i>/img_<j>.ppm`
//! (`.pgm` for single-channel data).

use std::fs;
use std::path::{Path, PathBuf};

use mpfgvc_tensor::{Scalar, Tensor};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{config, Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCoords {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub supercategory_name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    /// Stamped patch indices per image, in file order (class-major).
    pub discriminative_patch_coords: PatchCoords,
}

/// Images of one split, kept as the raw 8-bit buffers read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub pixels: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    pub truth: Vec<Vec<usize>>,
    pub side: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Split,
    pub test: Split,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixel `(y, x, ch)` in `[0, 1]`.
    pub fn normalized(&self, i: usize) -> Vec<f64> {
        self.pixels[i].iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// `[B, H, W, ch]` batch of normalized images; `flips[b]` mirrors image `b`.
    pub fn batch<T: Scalar>(&self, ids: &[usize], flips: Option<&[bool]>) -> Tensor<T> {
        let (s, ch) = (self.side, self.channels);
        let mut data = Vec::with_capacity(ids.len() * s * s * ch);
        for (bi, &i) in ids.iter().enumerate() {
            let px = &self.pixels[i];
            let flip = flips.is_some_and(|f| f[bi]);
            for y in 0..s {
                for x in 0..s {
                    let sx = if flip { s - 1 - x } else { x };
                    let o = (y * s + sx) * ch;
                    data.extend(px[o..o + ch].iter().map(|&v| T::lit(v as f64 / 255.0)));
                }
            }
        }
        Tensor::new(vec![ids.len(), s, s, ch], data).expect("batch shape")
    }

    /// A fixed permutation of `0..len` for the given seed.
    pub fn order(&self, seed: u64) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids
    }

    /// Yields `(label, normalized pixels)` in seeded order.
    pub fn iter_shuffled(&self, seed: u64) -> impl Iterator<Item = (usize, Vec<f64>)> + '_ {
        self.order(seed).into_iter().map(move |i| (self.labels[i], self.normalized(i)))
    }

    pub fn labels_balanced(&self, classes: usize) -> bool {
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts.windows(2).all(|w| w[0] == w[1])
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn image_seed(seed: u64, split: u64, class: usize, j: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ split) ^ class as u64) ^ j as u64)
}

pub fn class_name(i: usize) -> String {
    format!("class_{i}")
}

/// The class patterns, shared background frequencies and the generator seed.
struct Recipe {
    patterns: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl Recipe {
    fn new(synth: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(synth.seed));
        let len = synth.patch * synth.patch * synth.channels;
        let base: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let patterns = (0..synth.classes)
            .map(|_| {
                base.iter()
                    .map(|&b| (1.0 - synth.class_contrast) * b + synth.class_contrast * rng.random::<f64>())
                    .collect()
            })
            .collect();
        let side = synth.image_side;
        let waves: Vec<(f64, f64, f64)> = (0..synth.channels)
            .map(|_| {
                (
                    rng.random_range(1.0..3.0),
                    rng.random_range(1.0..3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let mut background = Vec::with_capacity(side * side * synth.channels);
        for y in 0..side {
            for x in 0..side {
                for &(fx, fy, phase) in &waves {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / side as f64 + phase;
                    background.push(0.5 + 0.3 * arg.sin());
                }
            }
        }
        Self { patterns, background }
    }

    /// One image and its stamped cells, from its own seed.
    fn render(&self, synth: &SynthConfig, class: usize, seed: u64) -> (Vec<u8>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (side, ch, p) = (synth.image_side, synth.channels, synth.patch);
        let grid = synth.grid();
        let mut img = self.background.clone();
        let mut cells = index::sample(&mut rng, grid * grid, synth.signal_patches).into_vec();
        cells.sort_unstable();
        let pat = &self.patterns[class];
        for &cell in &cells {
            let (gy, gx) = (cell / grid, cell % grid);
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..ch {
                        let o = ((gy * p + dy) * side + gx * p + dx) * ch + c;
                        img[o] = pat[(dy * p + dx) * ch + c];
                    }
                }
            }
        }
        if synth.noise > 0.0 {
            let normal = Normal::new(0.0, synth.noise).expect("noise std");
            for v in img.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        let px = img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        (px, cells)
    }
}

/// Builds the dataset in memory. Pure in `synth`.
pub fn synthesize(synth: &SynthConfig) -> Result<Dataset> {
    synth.validate()?;
    let recipe = Recipe::new(synth);
    let make = |split_tag: u64, per_class: usize| -> Split {
        let jobs: Vec<(usize, usize)> = (0..synth.classes)
            .flat_map(|c| (0..per_class).map(move |j| (c, j)))
            .collect();
        let rendered: Vec<(Vec<u8>, Vec<usize>)> = jobs
            .par_iter()
            .map(|&(c, j)| recipe.render(synth, c, image_seed(synth.seed, split_tag, c, j)))
            .collect();
        let labels = jobs.iter().map(|&(c, _)| c).collect();
        let (pixels, truth) = rendered.into_iter().unzip();
        Split {
            pixels,
            labels,
            truth,
            side: synth.image_side,
            channels: synth.channels,
        }
    };
    let train = make(1, synth.train_per_class);
    let test = make(2, synth.test_per_class);
    let meta = DatasetMeta {
        supercategory_name: synth.supercategory.clone(),
        num_classes: synth.classes,
        class_names: (0..synth.classes).map(class_name).collect(),
        n_train_per_class: synth.train_per_class,
        n_test_per_class: synth.test_per_class,
        image_side: synth.image_side,
        channels: synth.channels,
        patch: synth.patch,
        discriminative_patch_coords: PatchCoords {
            train: train.truth.clone(),
            test: test.truth.clone(),
        },
    };
    Ok(Dataset { meta, train, test })
}

fn extension(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

pub fn image_path(root: &Path, split: &str, class: usize, j: usize, channels: usize) -> PathBuf {
    root.join(split)
        .join(format!("class_{class}"))
        .join(format!("img_{j}.{}", extension(channels)))
}

/// Binary PPM (3 channels) or PGM (1 channel), maxval 255.
pub fn encode_pnm(pixels: &[u8], width: usize, height: usize, channels: usize) -> Vec<u8> {
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pnm(path: &Path, pixels: &[u8], width: usize, height: usize, channels: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, encode_pnm(pixels, width, height, channels)).at(path)
}

/// Parses a binary PGM/PPM with maxval 255: `(width, height, channels, pixels)`.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("maxval {max} unsupported"));
    }
    let body = bytes.get(pos..pos + w * h * channels).ok_or("truncated pixel data")?;
    Ok((w, h, channels, body.to_vec()))
}

pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).at(path)?;
    decode_pnm(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

impl Dataset {
    /// Writes images and `meta.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let m = &self.meta;
        for (name, split, per_class) in [
            ("train", &self.train, m.n_train_per_class),
            ("test", &self.test, m.n_test_per_class),
        ] {
            for (i, px) in split.pixels.iter().enumerate() {
                let path = image_path(root, name, split.labels[i], i % per_class, m.channels);
                write_pnm(&path, px, m.image_side, m.image_side, m.channels)?;
            }
        }
        let meta_path = root.join("meta.json");
        fs::write(&meta_path, serde_json::to_vec_pretty(m)?).at(&meta_path)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let meta_path = root.join("meta.json");
        let text = fs::read_to_string(&meta_path).at(&meta_path)?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: meta_path.clone(),
            msg: e.to_string(),
        })?;
        let bad_meta = |msg: String| Error::Format {
            path: meta_path.clone(),
            msg,
        };
        if meta.class_names.len() != meta.num_classes {
            return Err(bad_meta("class_names does not match num_classes".into()));
        }
        let grid_cells = (meta.image_side / meta.patch.max(1)).pow(2);
        let read_split = |name: &str, per_class: usize, coords: &[Vec<usize>]| -> Result<Split> {
            if coords.len() != per_class * meta.num_classes {
                return Err(bad_meta(format!("{name}: patch coords for {} images", coords.len())));
            }
            if coords.iter().flatten().any(|&c| c >= grid_cells) {
                return Err(bad_meta(format!("{name}: patch coordinate outside the grid")));
            }
            let mut split = Split {
                pixels: Vec::new(),
                labels: Vec::new(),
                truth: coords.to_vec(),
                side: meta.image_side,
                channels: meta.channels,
            };
            for c in 0..meta.num_classes {
                for j in 0..per_class {
                    let path = image_path(root, name, c, j, meta.channels);
                    let (w, h, ch, px) = read_pnm(&path)?;
                    if w != meta.image_side || h != meta.image_side || ch != meta.channels {
                        return Err(Error::Format {
                            path,
                            msg: format!(
                                "image is {w}x{h}x{ch}, expected {0}x{0}x{1}",
                                meta.image_side, meta.channels
                            ),
                        });
                    }
                    split.pixels.push(px);
                    split.labels.push(c);
                }
            }
            Ok(split)
        };
        let coords = &meta.discriminative_patch_coords;
        let train = read_split("train", meta.n_train_per_class, &coords.train)?;
        let test = read_split("test", meta.n_test_per_class, &coords.test)?;
        Ok(Self { meta, train, test })
    }
}

/// Writes a synthetic dataset to `root` and returns it.
pub fn generate_dataset(synth: &SynthConfig, root: &Path) -> Result<Dataset> {
    let ds = synthesize(synth)?;
    ds.write(root)?;
    Ok(ds)
}

/// Top-1 accuracy of a nearest-class-mean classifier on raw pixels.
pub fn nearest_mean_accuracy(train: &Split, test: &Split, classes: usize) -> Result<f64> {
    if test.is_empty() || train.is_empty() {
        return Err(config("nearest-mean oracle needs non-empty splits"));
    }
    let dim = train.pixels[0].len();
    let mut means = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for i in 0..train.len() {
        let l = train.labels[i];
        counts[l] += 1;
        for (m, v) in means[l].iter_mut().zip(train.normalized(i)) {
            *m += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.normalized(i);
            let dists: Vec<f64> = means
                .iter()
                .map(|m| m.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            let best = dists
                .iter()
                .enumerate()
                .fold(0, |best, (c, &d)| if d < dists[best] { c } else { best });
            best == test.labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
