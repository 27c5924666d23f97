//! Attention heatmap, selection mask and selection JSON for one image.

use std::fs;
use std::path::{Path, PathBuf};

use mpfgvc_tensor::{Graph, Scalar, Tensor};
use serde::Serialize;

use crate::data::{read_pnm, write_pnm};
use crate::error::{config, IoContext, Result};
use crate::model::Model;
use crate::ssvp;
use crate::vit::Selection;
use crate::vlfm::FusionState;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Visualization {
    pub selected_ids: Vec<usize>,
    /// Head-summed class-token attention over the patch grid.
    pub scores: Vec<f64>,
    /// Fusion attention over `[E_V; E_T]`, when the model has a trained fusion
    /// module that attends over text.
    pub s: Option<Vec<f64>>,
    #[serde(skip)]
    pub heatmap: Vec<u8>,
    #[serde(skip)]
    pub mask: Vec<u8>,
    #[serde(skip)]
    pub side: usize,
}

/// Min-max scales `scores` to `[0, 255]` and upsamples each grid cell to a
/// `patch x patch` block. A constant map becomes all zeros.
pub fn heatmap_pixels(scores: &[f64], grid: usize, patch: usize) -> Vec<u8> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let level: Vec<u8> = scores
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    upsample(&level, grid, patch)
}

/// 255 on selected cells, 0 elsewhere, at image resolution.
pub fn mask_pixels(ids: &[usize], grid: usize, patch: usize) -> Vec<u8> {
    let mut cells = vec![0u8; grid * grid];
    for &i in ids {
        cells[i] = 255;
    }
    upsample(&cells, grid, patch)
}

fn upsample(cells: &[u8], grid: usize, patch: usize) -> Vec<u8> {
    let side = grid * patch;
    (0..side * side)
        .map(|p| {
            let (y, x) = (p / side, p % side);
            cells[(y / patch) * grid + x / patch]
        })
        .collect()
}

/// Runs one image `[H, W, ch]` (values in `[0, 1]`) through `model`.
pub fn visualize<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<Visualization> {
    let vc = &model.cfg.vit;
    let batch = image.clone().reshaped(&[1, vc.image_side, vc.image_side, vc.channels])?;
    let mut g = Graph::inference();
    let selection = match model.selection() {
        Selection::Disabled => Selection::Attention(model.cfg.variant.selector),
        s => s,
    };
    let fusion = model.cfg.variant.fusion;
    let with_fusion = fusion == crate::config::FusionMode::Vlfm;
    let f = model.forward(&mut g, &batch, &selection, false, with_fusion.then_some(fusion))?;
    let rec = &f.encoded.attention[0];
    let scores = ssvp::aggregate_head_attention(rec);
    let ids = f.encoded.selected[0].clone();
    let s = f.fusion.map(|fv| FusionState::from_graph(&g, &fv, 0).s);
    let (grid, patch) = (vc.grid(), vc.patch);
    Ok(Visualization {
        heatmap: heatmap_pixels(&scores, grid, patch),
        mask: mask_pixels(&ids, grid, patch),
        selected_ids: ids,
        scores,
        s,
        side: vc.image_side,
    })
}

/// Loads a PGM/PPM image as `[H, W, ch]` in `[0, 1]`.
pub fn load_image<T: Scalar>(path: &Path, side: usize, channels: usize) -> Result<Tensor<T>> {
    let (w, h, ch, px) = read_pnm(path)?;
    if w != side || h != side || ch != channels {
        return Err(config(format!(
            "{}: image is {w}x{h}x{ch}, model expects {side}x{side}x{channels}",
            path.display()
        )));
    }
    Ok(Tensor::new(
        vec![h, w, ch],
        px.iter().map(|&v| T::lit(v as f64 / 255.0)).collect(),
    )?)
}

/// Writes `heatmap.pgm`, `mask.pgm` and `selection.json` to `dir`.
pub fn write_visualization(dir: &Path, vis: &Visualization) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).at(dir)?;
    let heat = dir.join("heatmap.pgm");
    let mask = dir.join("mask.pgm");
    let json = dir.join("selection.json");
    write_pnm(&heat, &vis.heatmap, vis.side, vis.side, 1)?;
    write_pnm(&mask, &vis.mask, vis.side, vis.side, 1)?;
    fs::write(&json, serde_json::to_vec_pretty(vis)?).at(&json)?;
    Ok(vec![heat, mask, json])
}
