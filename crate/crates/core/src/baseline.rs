//! Detector-then-decoder baseline: detected boxes are teacher-encoded and
//! decoded directly, with no student.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::config::Config;
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::inference::prompt_with_labels;
use crate::teacher::Teacher;
use crate::types::{BBox, ImageTensor, SemanticSegmentation, WeakLabel};

const MIN_SIDE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub label: WeakLabel,
    pub score: f64,
}

pub trait Detector {
    fn name(&self) -> &str;

    /// Box detections for one image; `record` is available to oracles.
    fn detect(&self, image: &ImageTensor, record: Option<&DatasetRecord>) -> Result<Vec<Detection>>;
}

/// Ground-truth boxes, each dropped with `drop_prob`, otherwise with every
/// corner coordinate moved by Gaussian noise of std
/// `jitter_sigma * min(height, width)` and clamped to the image. Boxes that
/// end up under 2 px on a side are dropped.
pub fn oracle_detector(record: &DatasetRecord, jitter_sigma: f64, drop_prob: f64, seed: u64) -> Vec<WeakLabel> {
    let h = record.image.height() as f64;
    let w = record.image.width() as f64;
    let std = jitter_sigma * h.min(w);
    let noise = (std > 0.0).then(|| Normal::new(0.0, std).expect("positive std"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ record.id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut out = Vec::new();
    for label in &record.weak_labels {
        let Some(b) = label.bbox() else { continue };
        if drop_prob > 0.0 && rng.random::<f64>() < drop_prob {
            continue;
        }
        let mut c = [b.x_min, b.y_min, b.x_max, b.y_max];
        if let Some(n) = &noise {
            for v in &mut c {
                *v += n.sample(&mut rng);
            }
        }
        let (x0, x1) = (c[0].min(c[2]).clamp(0.0, w), c[0].max(c[2]).clamp(0.0, w));
        let (y0, y1) = (c[1].min(c[3]).clamp(0.0, h), c[1].max(c[3]).clamp(0.0, h));
        if x1 - x0 < MIN_SIDE || y1 - y0 < MIN_SIDE {
            continue;
        }
        out.push(WeakLabel::boxed(BBox::new(x0, y0, x1, y1), label.category));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleDetector {
    pub jitter_sigma: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl Detector for OracleDetector {
    fn name(&self) -> &str {
        "oracle"
    }

    fn detect(&self, _image: &ImageTensor, record: Option<&DatasetRecord>) -> Result<Vec<Detection>> {
        let record = record.ok_or_else(|| Error::InvalidLabel("the oracle detector needs the record".into()))?;
        Ok(oracle_detector(record, self.jitter_sigma, self.drop_prob, self.seed)
            .into_iter()
            .map(|label| Detection { label, score: 1.0 })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    /// `[x_min, y_min, x_max, y_max]` in resized-image pixels.
    pub bbox: [f64; 4],
    pub category: usize,
    pub score: f64,
}

/// Offline detections from JSON: `{"<image id>": [{bbox, category, score}]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FileDetector {
    entries: HashMap<u64, Vec<Detection>>,
}

impl FileDetector {
    pub fn load(path: &Path) -> Result<Self> {
        let raw: HashMap<String, Vec<DetectionEntry>> = serde_json::from_slice(&std::fs::read(path)?)?;
        let mut entries = HashMap::new();
        for (id, list) in raw {
            let id: u64 = id
                .parse()
                .map_err(|_| Error::InvalidLabel(format!("detection key {id:?} is not an image id")))?;
            let mut dets = Vec::with_capacity(list.len());
            for e in list {
                if !(0.0..=1.0).contains(&e.score) {
                    return Err(Error::InvalidLabel(format!("score {} outside [0, 1]", e.score)));
                }
                let [x0, y0, x1, y1] = e.bbox;
                dets.push(Detection {
                    label: WeakLabel::boxed(BBox::new(x0, y0, x1, y1), e.category),
                    score: e.score,
                });
            }
            entries.insert(id, dets);
        }
        Ok(FileDetector { entries })
    }
}

impl Detector for FileDetector {
    fn name(&self) -> &str {
        "file"
    }

    fn detect(&self, _image: &ImageTensor, record: Option<&DatasetRecord>) -> Result<Vec<Detection>> {
        let id = record
            .ok_or_else(|| Error::InvalidLabel("file detections are keyed by record id".into()))?
            .id;
        Ok(self.entries.get(&id).cloned().unwrap_or_default())
    }
}

/// Detector boxes, teacher-encoded, decoded and merged with the detector
/// confidences as scores.
pub fn det_sam_predict(
    image: &ImageTensor,
    record: Option<&DatasetRecord>,
    detector: &dyn Detector,
    teacher: &Teacher,
    backend: &dyn Backend,
    cfg: &Config,
) -> Result<SemanticSegmentation> {
    let dets = detector.detect(image, record)?;
    for d in &dets {
        d.label.validate(cfg.image_size, cfg.num_categories)?;
    }
    let labels: Vec<WeakLabel> = dets.iter().map(|d| d.label).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    prompt_with_labels(image, &labels, Some(&scores), teacher, backend, cfg)
}
