//! Frozen teacher prompter: turns boxes and points into the prompt
//! embeddings the student is trained to reproduce.
//!
//! Embedding layout for one token of width `d`:
//!
//! * `[0, 4)` hold `logit` of the normalized `(cx, cy, w, h)`. Points use the
//!   fixed `point_extent` for `w` and `h`. The mock decoder reads exactly
//!   these four entries back through the logistic function.
//! * `[4, d)` hold sinusoidal features of the label's corner coordinates at
//!   frequencies `2^j * pi`, alternating sine and cosine bands, plus a fixed
//!   per-kind type embedding.
//!
//! With two tokens per part the group is `[corner A | corner B]`, each token
//! carrying the geometry entries and the features of one corner.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::backend::logit;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::{LabelKind, Prompt, TargetSet, TeacherTarget, WeakLabel};

const TYPE_STREAM: u64 = 0x7465_6163_6865_72;
const TYPE_STD: f64 = 0.5;
const MAX_OCTAVE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEmbedding {
    pub vector: Vec<f64>,
    pub source_kind: LabelKind,
}

/// The frozen teacher. Holds only constants derived from the seed.
#[derive(Debug, Clone)]
pub struct Teacher {
    image_size: usize,
    embed_dim: usize,
    tokens_per_part: usize,
    point_extent: f64,
    box_type: [Vec<f64>; 2],
    point_type: Vec<f64>,
    not_a_point: Vec<f64>,
}

impl Teacher {
    pub fn new(cfg: &Config) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TYPE_STREAM);
        let normal = Normal::new(0.0, TYPE_STD).expect("valid normal");
        let d = cfg.embed_dim;
        let mut draw = || -> Vec<f64> {
            let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            v[..4].fill(0.0);
            v
        };
        let box_type = [draw(), draw()];
        let point_type = draw();
        let not_a_point = draw();
        Teacher {
            image_size: cfg.image_size,
            embed_dim: d,
            tokens_per_part: cfg.tokens_per_part,
            point_extent: cfg.point_extent,
            box_type,
            point_type,
            not_a_point,
        }
    }

    pub fn width(&self) -> usize {
        self.tokens_per_part * self.embed_dim
    }

    /// Normalized coordinates are kept a quarter pixel inside `(0, 1)` so the
    /// logit stays finite for full-extent boxes.
    fn geometry(&self, params: [f64; 4]) -> [f64; 4] {
        let eps = 0.25 / self.image_size as f64;
        params.map(|p| logit(p.clamp(eps, 1.0 - eps)))
    }

    fn token(&self, geometry: &[f64; 4], coords: &[f64], type_emb: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.embed_dim];
        v[..4].copy_from_slice(geometry);
        for m in 0..self.embed_dim - 4 {
            let band = m / coords.len();
            let octave = (band / 2) % MAX_OCTAVE;
            let phase = (1u64 << octave) as f64 * PI * coords[m % coords.len()];
            let feature = if band % 2 == 0 { phase.sin() } else { phase.cos() };
            v[4 + m] = feature + type_emb[4 + m];
        }
        v
    }

    pub fn encode_box(&self, label: &WeakLabel) -> Result<TeacherEmbedding> {
        let Prompt::Box(b) = label.prompt else {
            return Err(Error::InvalidLabel("encode_box needs a box label".into()));
        };
        if !(b.width() >= 2.0 && b.height() >= 2.0) {
            return Err(Error::DegenerateBox {
                width: b.width(),
                height: b.height(),
            });
        }
        let s = self.image_size as f64;
        if !b.is_valid_within(s, s) {
            return Err(Error::InvalidLabel(format!("box {b:?} outside {s}x{s} image")));
        }
        let (cx, cy, w, h) = b.normalized_cxcywh(self.image_size);
        let geometry = self.geometry([cx, cy, w, h]);
        let (x0, y0, x1, y1) = (b.x_min / s, b.y_min / s, b.x_max / s, b.y_max / s);
        let vector = match self.tokens_per_part {
            1 => self.token(&geometry, &[x0, y0, x1, y1], &self.box_type[0]),
            _ => {
                let mut v = self.token(&geometry, &[x0, y0], &self.box_type[0]);
                v.extend(self.token(&geometry, &[x1, y1], &self.box_type[1]));
                v
            }
        };
        Ok(TeacherEmbedding {
            vector,
            source_kind: LabelKind::Box,
        })
    }

    pub fn encode_point(&self, label: &WeakLabel) -> Result<TeacherEmbedding> {
        let Prompt::Point { x, y } = label.prompt else {
            return Err(Error::InvalidLabel("encode_point needs a point label".into()));
        };
        let s = self.image_size as f64;
        if !(x.is_finite() && y.is_finite() && (0.0..=s).contains(&x) && (0.0..=s).contains(&y)) {
            return Err(Error::OutOfBounds {
                x,
                y,
                size: self.image_size,
            });
        }
        let (px, py) = (x / s, y / s);
        let geometry = self.geometry([px, py, self.point_extent, self.point_extent]);
        let vector = match self.tokens_per_part {
            1 => self.token(&geometry, &[px, py], &self.point_type),
            _ => {
                let mut v = self.token(&geometry, &[px, py], &self.point_type);
                let mut pad = self.not_a_point.clone();
                pad[..4].copy_from_slice(&geometry);
                v.extend(pad);
                v
            }
        };
        Ok(TeacherEmbedding {
            vector,
            source_kind: LabelKind::Point,
        })
    }

    pub fn encode(&self, label: &WeakLabel) -> Result<TeacherEmbedding> {
        match label.kind() {
            LabelKind::Box => self.encode_box(label),
            LabelKind::Point => self.encode_point(label),
        }
    }

    /// Digest of the teacher's constants, for freeze checks.
    pub fn parameter_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self
            .box_type
            .iter()
            .chain([&self.point_type, &self.not_a_point])
            .flat_map(|t| t.iter())
        {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(self.point_extent.to_le_bytes());
        hasher.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Pads the encoded labels with no-part entries up to `S`.
pub fn build_target_set(teacher: &Teacher, labels: &[WeakLabel], cfg: &Config) -> Result<TargetSet> {
    let capacity = cfg.num_queries;
    if labels.len() > capacity {
        return Err(Error::TooManyParts {
            count: labels.len(),
            capacity,
        });
    }
    let mut targets = Vec::with_capacity(capacity);
    for label in labels {
        if label.category >= cfg.num_categories {
            return Err(Error::InvalidLabel(format!(
                "category {} out of range 0..{}",
                label.category, cfg.num_categories
            )));
        }
        targets.push(TeacherTarget {
            category: label.category,
            embedding: teacher.encode(label)?.vector,
        });
    }
    targets.resize(
        capacity,
        TeacherTarget {
            category: cfg.no_part(),
            embedding: vec![0.0; cfg.token_width()],
        },
    );
    Ok(TargetSet {
        targets,
        num_real: labels.len(),
        no_part: cfg.no_part(),
    })
}
