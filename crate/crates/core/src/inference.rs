//! Prediction: student queries to kept prompts, masks, and a merged
//! semantic map. Also the oracle mode that prompts with weak labels.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::{sigmoid, Backend, MaskLogits};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::imageio;
use crate::prompter::{prompter_forward, PrompterParams};
use crate::teacher::Teacher;
use crate::types::{FeatureMap, ImageTensor, SemanticSegmentation, StudentOutput, WeakLabel};

/// A retained query: its index, predicted category and class probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeptQuery {
    pub index: usize,
    pub category: usize,
    pub prob: f64,
}

/// Keeps queries whose most probable class is a part. Ties go to the
/// lowest class index.
pub fn select_foreground(output: &StudentOutput) -> Vec<KeptQuery> {
    let probs = output.class_probs();
    let no_part = probs.ncols() - 1;
    probs
        .rows()
        .into_iter()
        .enumerate()
        .filter_map(|(index, row)| {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            (best != no_part).then_some(KeptQuery {
                index,
                category: best,
                prob: row[best],
            })
        })
        .collect()
}

/// Labels each pixel with the category of the mask whose sigmoid is highest
/// there, if that exceeds the threshold; otherwise background. Equal mask
/// values go to the higher class probability, then the earlier entry.
pub fn merge_semantic(masks: &MaskLogits, kept: &[KeptQuery], cfg: &Config) -> Result<SemanticSegmentation> {
    let size = cfg.image_size;
    let background = cfg.no_part() as u16;
    if masks.len() != kept.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} kept queries",
            masks.len(),
            kept.len()
        )));
    }
    let (_, h, w) = masks.logits.dim();
    if !kept.is_empty() && (h, w) != (size, size) {
        return Err(Error::ShapeMismatch(format!("masks are {h}x{w}, expected {size}x{size}")));
    }
    let mut labels = Array2::from_elem((size, size), background);
    let mut scores = Array2::<f32>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let mut best: Option<(f64, f64)> = None;
            for (k, q) in kept.iter().enumerate() {
                let p = sigmoid(masks.logits[[k, y, x]] as f64);
                let better = match best {
                    None => true,
                    Some((bp, bc)) => p > bp || (p == bp && q.prob > bc),
                };
                if better {
                    best = Some((p, q.prob));
                    if p > cfg.mask_threshold {
                        labels[[y, x]] = q.category as u16;
                    } else {
                        labels[[y, x]] = background;
                    }
                    scores[[y, x]] = p as f32;
                }
            }
        }
    }
    Ok(SemanticSegmentation {
        labels,
        scores: Some(scores),
        background,
    })
}

/// Full pipeline on already encoded features.
pub fn predict_features(
    features: &FeatureMap,
    params: &PrompterParams,
    backend: &dyn Backend,
    cfg: &Config,
) -> Result<SemanticSegmentation> {
    let output = prompter_forward(features, params, cfg)?;
    let kept = select_foreground(&output);
    let tokens = output.prompt_tokens.select(Axis(0), &kept.iter().map(|k| k.index).collect::<Vec<_>>());
    let masks = backend.decode_masks(features, tokens.view())?;
    merge_semantic(&masks, &kept, cfg)
}

pub fn predict_image(
    image: &ImageTensor,
    params: &PrompterParams,
    backend: &dyn Backend,
    cfg: &Config,
) -> Result<SemanticSegmentation> {
    let features = backend.encode_image(image)?;
    predict_features(&features, params, backend, cfg)
}

/// Prompts with teacher encodings of labels, each with score 1 unless
/// `scores` is given.
pub fn prompt_with_labels(
    image: &ImageTensor,
    labels: &[WeakLabel],
    scores: Option<&[f64]>,
    teacher: &Teacher,
    backend: &dyn Backend,
    cfg: &Config,
) -> Result<SemanticSegmentation> {
    if labels.is_empty() {
        image.check_size(cfg)?;
        return Ok(SemanticSegmentation::background(cfg.image_size, cfg.no_part() as u16));
    }
    let mut tokens = Array2::zeros((labels.len(), cfg.token_width()));
    let mut kept = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        let e = teacher.encode(l)?;
        tokens.row_mut(i).assign(&ndarray::ArrayView1::from(&e.vector));
        kept.push(KeptQuery {
            index: i,
            category: l.category,
            prob: scores.map_or(1.0, |s| s[i]),
        });
    }
    let features = backend.encode_image(image)?;
    let masks = backend.decode_masks(&features, tokens.view())?;
    merge_semantic(&masks, &kept, cfg)
}

/// Upper-bound mode: weak labels go straight to the decoder.
pub fn oracle_predict(
    image: &ImageTensor,
    labels: &[WeakLabel],
    teacher: &Teacher,
    backend: &dyn Backend,
    cfg: &Config,
) -> Result<SemanticSegmentation> {
    prompt_with_labels(image, labels, None, teacher, backend, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationLegend {
    pub background: u16,
    pub categories: Vec<LegendEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub index: u16,
    pub name: String,
    pub color: [u8; 3],
}

/// Indexed PNG (palette index = category, `C` = background) plus a
/// `<path>.json` legend mapping indices to names.
pub fn write_segmentation(seg: &SemanticSegmentation, names: &[String], path: &Path) -> Result<()> {
    let colors = imageio::palette(seg.background as usize);
    imageio::write_indexed_png(path, &seg.labels, &colors)?;
    let mut categories: Vec<LegendEntry> = names
        .iter()
        .enumerate()
        .map(|(i, n)| LegendEntry {
            index: i as u16,
            name: n.clone(),
            color: colors[i],
        })
        .collect();
    categories.push(LegendEntry {
        index: seg.background,
        name: "background".into(),
        color: colors[seg.background as usize],
    });
    let legend = SegmentationLegend {
        background: seg.background,
        categories,
    };
    std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&legend)?)?;
    Ok(())
}
