use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;
use serde_json::Value;

use super::{Dataset, DatasetRecord, GtMask};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::imageio;
use crate::types::{BBox, SemanticSegmentation, WeakLabel};

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: Option<Vec<f64>>,
    segmentation: Option<Value>,
}

const KNOWN_KEYS: [&str; 3] = ["images", "annotations", "categories"];

/// Decodes the compressed COCO RLE string into run lengths.
pub fn decode_rle_string(s: &str) -> Option<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = (*bytes.get(p)? as i64) - 48;
            if !(0..64).contains(&c) || k > 12 {
                return None;
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts.into_iter().map(|c| u64::try_from(c).ok()).collect()
}

/// Column-major run lengths (starting with background) to an `h x w` mask.
fn rle_to_mask(counts: &[u64], h: usize, w: usize) -> Option<Array2<bool>> {
    let total: u64 = counts.iter().sum();
    if total != (h * w) as u64 {
        return None;
    }
    let mut mask = Array2::from_elem((h, w), false);
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        let run = run as usize;
        if i % 2 == 1 {
            for p in pos..pos + run {
                mask[[p % h, p / h]] = true;
            }
        }
        pos += run;
    }
    Some(mask)
}

/// Even-odd fill of a polygon, sampled at pixel centers.
pub fn rasterize_polygon(points: &[(f64, f64)], h: usize, w: usize, mask: &mut Array2<bool>) {
    if points.len() < 3 {
        return;
    }
    for y in 0..h {
        let py = y as f64 + 0.5;
        let mut xs = Vec::new();
        for i in 0..points.len() {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % points.len()];
            if (y0 <= py) != (y1 <= py) {
                xs.push(x0 + (py - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            for x in 0..w {
                let px = x as f64 + 0.5;
                if px > pair[0] && px < pair[1] {
                    mask[[y, x]] = true;
                }
            }
        }
    }
}

fn segmentation_mask(
    seg: &Value,
    img: &CocoImage,
    size: usize,
    id: u64,
) -> Result<Option<Array2<bool>>> {
    let bad = |reason: &str| Error::MalformedAnnotation {
        id,
        reason: reason.to_string(),
    };
    let (sx, sy) = (size as f64 / img.width as f64, size as f64 / img.height as f64);
    match seg {
        Value::Array(polys) => {
            if polys.is_empty() {
                return Ok(None);
            }
            let mut mask = Array2::from_elem((size, size), false);
            for poly in polys {
                let coords: Vec<f64> = poly
                    .as_array()
                    .ok_or_else(|| bad("polygon is not an array"))?
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| bad("non-numeric polygon coordinate")))
                    .collect::<Result<_>>()?;
                if coords.len() % 2 != 0 || coords.len() < 6 {
                    return Err(bad("polygon needs an even count of at least 6 coordinates"));
                }
                let pts: Vec<(f64, f64)> = coords.chunks_exact(2).map(|c| (c[0] * sx, c[1] * sy)).collect();
                rasterize_polygon(&pts, size, size, &mut mask);
            }
            Ok(Some(mask))
        }
        Value::Object(rle) => {
            let dims: Vec<usize> = rle
                .get("size")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(|v| v.as_u64().map(|v| v as usize)).collect())
                .unwrap_or_default();
            let [h, w] = dims[..] else {
                return Err(bad("RLE size must be [height, width]"));
            };
            let counts = match rle.get("counts") {
                Some(Value::String(s)) => decode_rle_string(s).ok_or_else(|| bad("invalid compressed RLE"))?,
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|v| v.as_u64().ok_or_else(|| bad("invalid RLE count")))
                    .collect::<Result<_>>()?,
                _ => return Err(bad("RLE without counts")),
            };
            let src = rle_to_mask(&counts, h, w).ok_or_else(|| bad("RLE counts do not cover the mask"))?;
            Ok(Some(Array2::from_shape_fn((size, size), |(y, x)| {
                let sy_ = ((y as f64 + 0.5) * h as f64 / size as f64) as usize;
                let sx_ = ((x as f64 + 0.5) * w as f64 / size as f64) as usize;
                src[[sy_.min(h - 1), sx_.min(w - 1)]]
            })))
        }
        Value::Null => Ok(None),
        _ => Err(bad("unsupported segmentation encoding")),
    }
}

/// Loads COCO-style part annotations: weak labels from `bbox`, and
/// evaluation masks from `segmentation` (polygons or RLE). Images and
/// coordinates are resized to `cfg.image_size`.
pub fn load_coco_parts(annotation_path: &Path, image_dir: &Path, cfg: &Config) -> Result<Dataset> {
    let raw: Value = serde_json::from_slice(&std::fs::read(annotation_path)?)?;
    if let Value::Object(map) = &raw {
        for key in map.keys().filter(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            log::warn!("ignoring COCO field {key:?}");
        }
    }
    let field = |k: &str| raw.get(k).cloned().unwrap_or(Value::Array(Vec::new()));
    let images: Vec<CocoImage> = serde_json::from_value(field("images"))?;
    let mut categories: Vec<CocoCategory> = serde_json::from_value(field("categories"))?;
    let annotations: Vec<CocoAnnotation> = serde_json::from_value(field("annotations"))?;
    categories.sort_by_key(|c| c.id);
    if categories.len() != cfg.num_categories {
        return Err(Error::InvalidConfig(format!(
            "annotations define {} categories, num_categories is {}",
            categories.len(),
            cfg.num_categories
        )));
    }
    let cat_index: HashMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    let image_ids: HashMap<u64, usize> = images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    for a in &annotations {
        if !image_ids.contains_key(&a.image_id) {
            return Err(Error::MalformedAnnotation {
                id: a.id,
                reason: format!("unknown image_id {}", a.image_id),
            });
        }
        by_image.entry(a.image_id).or_default().push(a);
    }
    let size = cfg.image_size;
    let background = cfg.num_categories as u16;
    let mut records = Vec::with_capacity(images.len());
    for img in &images {
        let image = imageio::read_rgb_image(&image_dir.join(&img.file_name), size)?;
        if image.original_size != (img.height, img.width) {
            log::warn!(
                "image {} is {:?} on disk but {}x{} in the annotations",
                img.id,
                image.original_size,
                img.height,
                img.width
            );
        }
        let (sx, sy) = (size as f64 / img.width as f64, size as f64 / img.height as f64);
        let mut weak = Vec::new();
        let mut labels = Array2::from_elem((size, size), background);
        let mut has_mask = false;
        for a in by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]) {
            let bad = |reason: String| Error::MalformedAnnotation { id: a.id, reason };
            let category = *cat_index
                .get(&a.category_id)
                .ok_or_else(|| bad(format!("unknown category_id {}", a.category_id)))?;
            let bbox = match a.bbox.as_deref() {
                Some(&[x, y, w, h]) => BBox::from_xywh(x, y, w, h),
                _ => return Err(bad("bbox must be [x, y, width, height]".into())),
            };
            if !bbox.is_valid_within(img.width as f64, img.height as f64) {
                return Err(bad(format!(
                    "bbox {:?} outside the {}x{} image",
                    a.bbox.as_deref().unwrap_or(&[]),
                    img.width,
                    img.height
                )));
            }
            let scaled = bbox.scale(sx, sy);
            if scaled.width() < 2.0 || scaled.height() < 2.0 {
                log::warn!("annotation {} is under 2 px after resizing; skipped", a.id);
                continue;
            }
            weak.push(WeakLabel::boxed(scaled, category));
            if let Some(seg) = &a.segmentation {
                if let Some(mask) = segmentation_mask(seg, img, size, a.id)? {
                    has_mask = true;
                    ndarray::Zip::from(&mut labels).and(&mask).for_each(|l, &m| {
                        if m {
                            *l = category as u16;
                        }
                    });
                }
            }
        }
        if weak.len() > cfg.num_queries {
            return Err(Error::TooManyParts {
                count: weak.len(),
                capacity: cfg.num_queries,
            });
        }
        records.push(DatasetRecord {
            id: img.id,
            image,
            weak_labels: weak,
            gt_mask: has_mask.then(|| {
                GtMask::new(SemanticSegmentation {
                    labels,
                    scores: None,
                    background,
                })
            }),
        });
    }
    Ok(Dataset {
        records,
        categories: categories.into_iter().map(|c| c.name).collect(),
        image_size: size,
    })
}
