//! Semantic segmentation metrics over foreground categories.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::types::SemanticSegmentation;

/// Per-category pixel tallies. Labels at or above the category count are
/// background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub gt_pixels: Vec<u64>,
    pub pred_pixels: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_categories: usize) -> Self {
        ConfusionAccumulator {
            intersection: vec![0; num_categories],
            union: vec![0; num_categories],
            gt_pixels: vec![0; num_categories],
            pred_pixels: vec![0; num_categories],
        }
    }

    pub fn num_categories(&self) -> usize {
        self.intersection.len()
    }

    pub fn accumulate(&mut self, gt: &SemanticSegmentation, pred: &SemanticSegmentation) -> Result<()> {
        if gt.dim() != pred.dim() {
            return Err(Error::ShapeMismatch(format!(
                "ground truth {:?} vs prediction {:?}",
                gt.dim(),
                pred.dim()
            )));
        }
        let c = self.num_categories();
        for (&g, &p) in gt.labels.iter().zip(pred.labels.iter()) {
            let (g, p) = (g as usize, p as usize);
            if g < c {
                self.gt_pixels[g] += 1;
                self.union[g] += 1;
            }
            if p < c {
                self.pred_pixels[p] += 1;
                if p != g {
                    self.union[p] += 1;
                }
            }
            if g < c && g == p {
                self.intersection[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_categories() != self.num_categories() {
            return Err(Error::ShapeMismatch("accumulators over different categories".into()));
        }
        for (dst, src) in [
            (&mut self.intersection, &other.intersection),
            (&mut self.union, &other.union),
            (&mut self.gt_pixels, &other.gt_pixels),
            (&mut self.pred_pixels, &other.pred_pixels),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn iou(&self, k: usize) -> Option<f64> {
        (self.union[k] > 0).then(|| self.intersection[k] as f64 / self.union[k] as f64)
    }

    pub fn acc(&self, k: usize) -> Option<f64> {
        (self.gt_pixels[k] > 0).then(|| self.intersection[k] as f64 / self.gt_pixels[k] as f64)
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Result<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean IoU over categories with a nonzero union.
pub fn compute_miou(acc: &ConfusionAccumulator) -> Result<f64> {
    mean((0..acc.num_categories()).map(|k| acc.iou(k)))
}

/// Mean per-category recall over categories present in the ground truth.
pub fn compute_macc(acc: &ConfusionAccumulator) -> Result<f64> {
    mean((0..acc.num_categories()).map(|k| acc.acc(k)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub id: usize,
    pub name: String,
    pub iou: Option<f64>,
    pub acc: Option<f64>,
    pub gt_pixels: u64,
    pub pred_pixels: u64,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_category: Vec<CategoryMetrics>,
    pub miou: f64,
    pub macc: f64,
    pub num_images: usize,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_accumulator(
        acc: &ConfusionAccumulator,
        names: &[String],
        num_images: usize,
        config_hash: &str,
    ) -> Result<Self> {
        let per_category = (0..acc.num_categories())
            .map(|k| CategoryMetrics {
                id: k,
                name: names.get(k).cloned().unwrap_or_else(|| format!("category{k}")),
                iou: acc.iou(k),
                acc: acc.acc(k),
                gt_pixels: acc.gt_pixels[k],
                pred_pixels: acc.pred_pixels[k],
                intersection: acc.intersection[k],
                union: acc.union[k],
            })
            .collect();
        Ok(MetricsReport {
            per_category,
            miou: compute_miou(acc)?,
            macc: compute_macc(acc)?,
            num_images,
            config_hash: config_hash.to_string(),
        })
    }

    /// Rebuilds the accumulator from the stored counts.
    pub fn accumulator(&self) -> ConfusionAccumulator {
        let pick = |f: fn(&CategoryMetrics) -> u64| self.per_category.iter().map(f).collect();
        ConfusionAccumulator {
            intersection: pick(|c| c.intersection),
            union: pick(|c| c.union),
            gt_pixels: pick(|c| c.gt_pixels),
            pred_pixels: pick(|c| c.pred_pixels),
        }
    }

    /// Recomputes `(miou, macc)` from the per-category counts.
    pub fn resummarize(&self) -> Result<(f64, f64)> {
        let acc = self.accumulator();
        Ok((compute_miou(&acc)?, compute_macc(&acc)?))
    }
}

/// Streams `predictor` over every record with a ground-truth mask.
pub fn evaluate_dataset(
    dataset: &Dataset,
    mut predictor: impl FnMut(&DatasetRecord) -> Result<SemanticSegmentation>,
    config_hash: &str,
) -> Result<MetricsReport> {
    let mut acc = ConfusionAccumulator::new(dataset.num_categories());
    let mut n = 0;
    for record in &dataset.records {
        let Some(gt) = &record.gt_mask else {
            log::warn!("record {} has no ground-truth mask; skipped", record.id);
            continue;
        };
        let pred = predictor(record)?;
        acc.accumulate(gt.read()?, &pred)?;
        n += 1;
    }
    MetricsReport::from_accumulator(&acc, &dataset.categories, n, config_hash)
}
