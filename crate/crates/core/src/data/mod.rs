//! Datasets: records with weak labels and evaluation-only masks, the
//! synthetic generator, COCO-style loading, splitting and persistence.

mod coco;
mod synthetic;

use std::cell::Cell;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::types::{ImageTensor, LabelKind, SemanticSegmentation, WeakLabel};

pub use coco::load_coco_parts;
pub use synthetic::{generate_synthetic, SyntheticSpec};

thread_local! {
    static TRAINING_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Marks the current thread as training while alive. Ground-truth masks
/// refuse to be read inside it.
#[must_use]
pub struct TrainingScope {
    _private: (),
}

impl TrainingScope {
    pub fn enter() -> Self {
        TRAINING_DEPTH.with(|d| d.set(d.get() + 1));
        TrainingScope { _private: () }
    }

    pub fn active() -> bool {
        TRAINING_DEPTH.with(|d| d.get() > 0)
    }
}

impl Drop for TrainingScope {
    fn drop(&mut self) {
        TRAINING_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// A pixel-level mask reserved for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GtMask(SemanticSegmentation);

impl GtMask {
    pub fn new(seg: SemanticSegmentation) -> Self {
        GtMask(seg)
    }

    pub fn read(&self) -> Result<&SemanticSegmentation> {
        if TrainingScope::active() {
            return Err(Error::TaintedAccess);
        }
        Ok(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: u64,
    pub image: ImageTensor,
    /// Boxes, in the resized image's pixel coordinates.
    pub weak_labels: Vec<WeakLabel>,
    pub gt_mask: Option<GtMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub categories: Vec<String>,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn max_parts(&self) -> usize {
        self.records.iter().map(|r| r.weak_labels.len()).max().unwrap_or(0)
    }
}

/// Weak labels of a record under a supervision mode: boxes as they are, or
/// each box replaced by its center point.
pub fn derive_weak_labels(record: &DatasetRecord, mode: LabelKind) -> Vec<WeakLabel> {
    record
        .weak_labels
        .iter()
        .map(|l| match (mode, l.bbox()) {
            (LabelKind::Point, Some(b)) => {
                let (x, y) = b.center();
                WeakLabel::point(x, y, l.category)
            }
            _ => *l,
        })
        .collect()
}

/// Seeded disjoint split into train and validation parts.
pub fn split_dataset(dataset: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = fractions;
    if !(a.is_finite() && b.is_finite()) || a < 0.0 || b < 0.0 || (a + b - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFraction(format!(
            "({a}, {b}) must be non-negative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (a * dataset.len() as f64).round() as usize;
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Dataset {
            records: idx.iter().map(|&i| dataset.records[i].clone()).collect(),
            categories: dataset.categories.clone(),
            image_size: dataset.image_size,
        }
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    id: u64,
    image: String,
    mask: Option<String>,
    labels: Vec<WeakLabel>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    image_size: usize,
    categories: Vec<String>,
    records: Vec<RecordEntry>,
}

const LABELS_FILE: &str = "labels.json";

/// Writes `images/*.png`, `masks/*.png` (indexed) and `labels.json`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let colors = imageio::palette(dataset.num_categories());
    let mut records = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let image = format!("images/{:06}.png", r.id);
        imageio::write_rgb_png(&dir.join(&image), &r.image.pixels)?;
        let mask = match &r.gt_mask {
            Some(m) => {
                let name = format!("masks/{:06}.png", r.id);
                imageio::write_indexed_png(&dir.join(&name), &m.read()?.labels, &colors)?;
                Some(name)
            }
            None => None,
        };
        records.push(RecordEntry {
            id: r.id,
            image,
            mask,
            labels: r.weak_labels.clone(),
        });
    }
    let manifest = Manifest {
        image_size: dataset.image_size,
        categories: dataset.categories.clone(),
        records,
    };
    std::fs::write(dir.join(LABELS_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(LABELS_FILE);
    let text = std::fs::read(&path).map_err(|_| Error::MissingImage(path.clone()))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let background = manifest.categories.len() as u16;
    let mut records = Vec::with_capacity(manifest.records.len());
    for e in manifest.records {
        let image = imageio::read_rgb_image(&dir.join(&e.image), manifest.image_size)?;
        let gt_mask = match &e.mask {
            Some(m) => {
                let labels = imageio::read_indexed_png(&dir.join(m))?;
                if labels.dim() != (manifest.image_size, manifest.image_size) {
                    return Err(Error::ShapeMismatch(format!("mask {m} has size {:?}", labels.dim())));
                }
                Some(GtMask::new(SemanticSegmentation {
                    labels,
                    scores: None,
                    background,
                }))
            }
            None => None,
        };
        for l in &e.labels {
            l.validate(manifest.image_size, manifest.categories.len())?;
        }
        records.push(DatasetRecord {
            id: e.id,
            image,
            weak_labels: e.labels,
            gt_mask,
        });
    }
    Ok(Dataset {
        records,
        categories: manifest.categories,
        image_size: manifest.image_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BBox;

    fn tiny(n: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n_images: n,
            n_categories: 3,
            max_parts: 4,
            size: 64,
            seed: 3,
        })
    }

    #[test]
    fn point_mode_uses_box_centers() {
        let record = DatasetRecord {
            id: 0,
            image: ImageTensor::filled(64, 0.0),
            weak_labels: vec![WeakLabel::boxed(BBox::new(10.0, 10.0, 50.0, 30.0), 2)],
            gt_mask: None,
        };
        let pts = derive_weak_labels(&record, LabelKind::Point);
        assert_eq!(pts, vec![WeakLabel::point(30.0, 20.0, 2)]);
        assert_eq!(derive_weak_labels(&record, LabelKind::Box), record.weak_labels);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = tiny(50);
        let (a, b) = split_dataset(&ds, (0.8, 0.2), 1).unwrap();
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut ids: Vec<u64> = a.records.iter().chain(&b.records).map(|r| r.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<u64>>());
        let (a2, _) = split_dataset(&ds, (0.8, 0.2), 1).unwrap();
        assert_eq!(a, a2);
        assert!(matches!(
            split_dataset(&ds, (0.7, 0.2), 1),
            Err(Error::InvalidFraction(_))
        ));
        assert!(split_dataset(&ds, (1.2, -0.2), 1).is_err());
    }

    #[test]
    fn taint_guard() {
        let ds = tiny(1);
        let mask = ds.records[0].gt_mask.as_ref().unwrap();
        assert!(mask.read().is_ok());
        {
            let _scope = TrainingScope::enter();
            assert!(matches!(mask.read(), Err(Error::TaintedAccess)));
        }
        assert!(mask.read().is_ok());
    }

    #[test]
    fn persist_round_trip() {
        let ds = tiny(4);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
