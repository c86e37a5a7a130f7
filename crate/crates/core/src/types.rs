//! Domain types shared across the pipeline.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

/// An RGB image, `height x width x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub pixels: Array3<f32>,
    /// `(height, width)` before resizing.
    pub original_size: (usize, usize),
}

impl ImageTensor {
    pub fn new(pixels: Array3<f32>, original_size: (usize, usize)) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("empty image".into()));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::ShapeMismatch("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor {
            pixels,
            original_size,
        })
    }

    /// A constant-valued square image.
    pub fn filled(size: usize, value: f32) -> Self {
        ImageTensor {
            pixels: Array3::from_elem((size, size, 3), value.clamp(0.0, 1.0)),
            original_size: (size, size),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Errors unless the image is `image_size x image_size`.
    pub fn check_size(&self, cfg: &Config) -> Result<()> {
        if self.height() != cfg.image_size || self.width() != cfg.image_size {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, config expects {}x{}",
                self.height(),
                self.width(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        Ok(())
    }
}

/// Frozen encoder output, `h x w x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub features: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn side(&self) -> (usize, usize) {
        let (h, w, _) = self.features.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.features.dim().2
    }
}

/// Axis-aligned box in absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// From COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    /// Normalized `(cx, cy, w, h)` for an image of side `size`.
    pub fn normalized_cxcywh(&self, size: usize) -> (f64, f64, f64, f64) {
        let s = size as f64;
        let (cx, cy) = self.center();
        (cx / s, cy / s, self.width() / s, self.height() / s)
    }

    pub fn is_valid_within(&self, width: f64, height: f64) -> bool {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        coords.iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width
            && self.y_max <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Box,
    Point,
}

impl std::str::FromStr for LabelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "box" | "bbox" => Ok(LabelKind::Box),
            "point" => Ok(LabelKind::Point),
            other => Err(format!("unknown label kind {other:?}")),
        }
    }
}

/// Geometry of a weak label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prompt {
    Box(BBox),
    Point { x: f64, y: f64 },
}

/// A box or point with a part category: the only supervision training sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakLabel {
    pub prompt: Prompt,
    pub category: usize,
}

impl WeakLabel {
    pub fn boxed(bbox: BBox, category: usize) -> Self {
        WeakLabel {
            prompt: Prompt::Box(bbox),
            category,
        }
    }

    pub fn point(x: f64, y: f64, category: usize) -> Self {
        WeakLabel {
            prompt: Prompt::Point { x, y },
            category,
        }
    }

    pub fn kind(&self) -> LabelKind {
        match self.prompt {
            Prompt::Box(_) => LabelKind::Box,
            Prompt::Point { .. } => LabelKind::Point,
        }
    }

    pub fn bbox(&self) -> Option<BBox> {
        match self.prompt {
            Prompt::Box(b) => Some(b),
            Prompt::Point { .. } => None,
        }
    }

    /// Checks geometry against a square image and the category range.
    pub fn validate(&self, image_size: usize, num_categories: usize) -> Result<()> {
        if self.category >= num_categories {
            return Err(Error::InvalidLabel(format!(
                "category {} out of range 0..{num_categories}",
                self.category
            )));
        }
        let s = image_size as f64;
        match self.prompt {
            Prompt::Box(b) => {
                if !b.is_valid_within(s, s) {
                    return Err(Error::InvalidLabel(format!("box {b:?} invalid in {s}x{s}")));
                }
            }
            Prompt::Point { x, y } => {
                if !(x.is_finite() && y.is_finite() && (0.0..=s).contains(&x) && (0.0..=s).contains(&y)) {
                    return Err(Error::OutOfBounds {
                        x,
                        y,
                        size: image_size,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One entry of a padded target set: a category (or the no-part index) and
/// the teacher's prompt embedding (zero for no-part).
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTarget {
    pub category: usize,
    pub embedding: Vec<f64>,
}

/// Exactly `S` targets, real ones first, then no-part pads.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub targets: Vec<TeacherTarget>,
    pub num_real: usize,
    /// Index used for the no-part class (`C`).
    pub no_part: usize,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn is_real(&self, i: usize) -> bool {
        self.targets[i].category != self.no_part
    }

    /// Reorders targets; used to check order invariance.
    pub fn permuted(&self, order: &[usize]) -> TargetSet {
        TargetSet {
            targets: order.iter().map(|&i| self.targets[i].clone()).collect(),
            num_real: self.num_real,
            no_part: self.no_part,
        }
    }
}

/// Per-query class logits `S x (C+1)` and prompt tokens `S x (K*d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    pub class_logits: Array2<f64>,
    pub prompt_tokens: Array2<f64>,
}

impl StudentOutput {
    pub fn num_queries(&self) -> usize {
        self.class_logits.nrows()
    }

    /// Row-wise softmax of the class logits.
    pub fn class_probs(&self) -> Array2<f64> {
        let mut probs = self.class_logits.clone();
        for mut row in probs.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        probs
    }
}

/// Optimal target-to-prediction permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub target_to_pred: Vec<usize>,
    pub total_cost: f64,
}

/// Per-pixel category map; `background` marks pixels with no part.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSegmentation {
    pub labels: Array2<u16>,
    pub scores: Option<Array2<f32>>,
    pub background: u16,
}

impl SemanticSegmentation {
    pub fn background(size: usize, background: u16) -> Self {
        SemanticSegmentation {
            labels: Array2::from_elem((size, size), background),
            scores: None,
            background,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }
}
