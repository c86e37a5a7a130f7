//! Color overlays of segmentations on images.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::types::{ImageTensor, SemanticSegmentation};

pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayLegend {
    pub entries: Vec<OverlayEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayEntry {
    pub id: u16,
    pub name: String,
    pub color: [u8; 3],
    pub pixels: usize,
}

/// Blends each non-background pixel with its category color.
pub fn blend(image: &ImageTensor, seg: &SemanticSegmentation, palette: &[[u8; 3]]) -> Result<Array3<f32>> {
    let (h, w) = seg.dim();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs segmentation {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let mut out = image.pixels.clone();
    for ((y, x), &l) in seg.labels.indexed_iter() {
        if l == seg.background {
            continue;
        }
        let color = palette
            .get(l as usize)
            .ok_or_else(|| Error::ShapeMismatch(format!("no palette entry for label {l}")))?;
        for c in 0..3 {
            let v = out[[y, x, c]];
            out[[y, x, c]] = (1.0 - OVERLAY_ALPHA) * v + OVERLAY_ALPHA * color[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Writes the overlay PNG and a `<path>.json` legend of the categories
/// present.
pub fn emit_overlay(
    image: &ImageTensor,
    seg: &SemanticSegmentation,
    names: &[String],
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    let pixels = blend(image, seg, palette)?;
    imageio::write_rgb_png(path, &pixels)?;
    let mut counts = vec![0usize; palette.len()];
    for &l in seg.labels.iter() {
        if l != seg.background {
            counts[l as usize] += 1;
        }
    }
    let entries = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(id, &pixels)| OverlayEntry {
            id: id as u16,
            name: names.get(id).cloned().unwrap_or_else(|| format!("category{id}")),
            color: palette[id],
            pixels,
        })
        .collect();
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_vec_pretty(&OverlayLegend { entries })?,
    )?;
    Ok(())
}
