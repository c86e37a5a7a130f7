use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Backend, BackendHandle, MaskLogits};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::{FeatureMap, ImageTensor};

const PROJECTION_STREAM: u64 = 0x6d6f_636b_656e_63;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Reads normalized `(cx, cy, w, h)` from the first four token entries.
pub fn invert_box_params(token: &[f64]) -> (f64, f64, f64, f64) {
    assert!(token.len() >= 4, "token must have at least 4 entries");
    (
        sigmoid(token[0]),
        sigmoid(token[1]),
        sigmoid(token[2]),
        sigmoid(token[3]),
    )
}

/// Signed distance to the nearest box edge, scaled by `sharpness`, at a point
/// in normalized coordinates. Positive inside, zero on an edge.
pub fn soft_rect_logit(params: (f64, f64, f64, f64), sharpness: f64, x: f64, y: f64) -> f64 {
    let (cx, cy, w, h) = params;
    let dx = (cx + 0.5 * w - x).min(x - (cx - 0.5 * w));
    let dy = (cy + 0.5 * h - y).min(y - (cy - 0.5 * h));
    sharpness * dx.min(dy)
}

/// Evaluates [`soft_rect_logit`] at every pixel center of a `size x size`
/// grid. Width and height are clamped to at least two pixels.
pub fn render_soft_rect(params: (f64, f64, f64, f64), sharpness: f64, size: usize) -> Array2<f64> {
    let (cx, cy, w, h) = params;
    let min_side = 2.0 / size as f64;
    let params = (cx, cy, w.max(min_side), h.max(min_side));
    let inv = 1.0 / size as f64;
    Array2::from_shape_fn((size, size), |(row, col)| {
        let x = (col as f64 + 0.5) * inv;
        let y = (row as f64 + 0.5) * inv;
        soft_rect_logit(params, sharpness, x, y)
    })
}

/// Deterministic geometric backend.
///
/// The encoder flattens non-overlapping `stride x stride` patches and applies
/// a fixed seeded Gaussian projection to `d` channels. The decoder ignores
/// the features and renders the box held in the first four entries of each
/// prompt group, so teacher box prompts decode to exactly their rectangle.
#[derive(Debug, Clone)]
pub struct MockBackend {
    handle: BackendHandle,
    image_size: usize,
    token_width: usize,
    sharpness: f64,
    projection: Array2<f64>,
}

impl MockBackend {
    pub fn new(cfg: &Config) -> Self {
        let patch_dim = cfg.encoder_stride * cfg.encoder_stride * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_STREAM);
        let scale = 1.0 / (patch_dim as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((patch_dim, cfg.embed_dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        MockBackend {
            handle: BackendHandle {
                name: "mock".into(),
                encoder_stride: cfg.encoder_stride,
                embed_dim: cfg.embed_dim,
                frozen: true,
            },
            image_size: cfg.image_size,
            token_width: cfg.token_width(),
            sharpness: cfg.mask_sharpness,
            projection,
        }
    }

    fn check_width(&self, tokens: &ArrayView2<f64>) -> Result<()> {
        if tokens.ncols() != self.token_width {
            return Err(Error::DimMismatch {
                expected: self.token_width,
                got: tokens.ncols(),
            });
        }
        Ok(())
    }

    /// Double-precision logit planes, one per prompt group.
    pub fn decode_planes(&self, prompt_tokens: ArrayView2<f64>) -> Result<Array3<f64>> {
        self.check_width(&prompt_tokens)?;
        let n = prompt_tokens.nrows();
        let size = self.image_size;
        let mut out = Array3::zeros((n, size, size));
        for (i, token) in prompt_tokens.rows().into_iter().enumerate() {
            let params = invert_box_params(&token.to_vec());
            out.slice_mut(s![i, .., ..])
                .assign(&render_soft_rect(params, self.sharpness, size));
        }
        Ok(out)
    }

    /// Vector-Jacobian product of [`MockBackend::decode_planes`]: given
    /// `upstream = dL/dplanes`, returns `dL/dtokens`.
    pub fn decode_vjp(
        &self,
        prompt_tokens: ArrayView2<f64>,
        upstream: ArrayView3<f64>,
    ) -> Result<Array2<f64>> {
        self.check_width(&prompt_tokens)?;
        let size = self.image_size;
        let inv = 1.0 / size as f64;
        let min_side = 2.0 * inv;
        let mut grad = Array2::zeros(prompt_tokens.raw_dim());
        for (i, token) in prompt_tokens.rows().into_iter().enumerate() {
            let (cx, cy, w, h) = invert_box_params(&token.to_vec());
            let (we, he) = (w.max(min_side), h.max(min_side));
            // d(cx, cy, w, h)
            let mut dp = [0.0f64; 4];
            for row in 0..size {
                let y = (row as f64 + 0.5) * inv;
                for col in 0..size {
                    let g = upstream[[i, row, col]];
                    if g == 0.0 {
                        continue;
                    }
                    let x = (col as f64 + 0.5) * inv;
                    let terms = [
                        cx + 0.5 * we - x,
                        x - (cx - 0.5 * we),
                        cy + 0.5 * he - y,
                        y - (cy - 0.5 * he),
                    ];
                    let mut arg = 0;
                    for k in 1..4 {
                        if terms[k] < terms[arg] {
                            arg = k;
                        }
                    }
                    let gs = g * self.sharpness;
                    match arg {
                        0 => {
                            dp[0] += gs;
                            dp[2] += 0.5 * gs;
                        }
                        1 => {
                            dp[0] -= gs;
                            dp[2] += 0.5 * gs;
                        }
                        2 => {
                            dp[1] += gs;
                            dp[3] += 0.5 * gs;
                        }
                        _ => {
                            dp[1] -= gs;
                            dp[3] += 0.5 * gs;
                        }
                    }
                }
            }
            if w < min_side {
                dp[2] = 0.0;
            }
            if h < min_side {
                dp[3] = 0.0;
            }
            for (k, p) in [cx, cy, w, h].into_iter().enumerate() {
                grad[[i, k]] = dp[k] * p * (1.0 - p);
            }
        }
        Ok(grad)
    }
}

impl Backend for MockBackend {
    fn handle(&self) -> &BackendHandle {
        &self.handle
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<FeatureMap> {
        if image.height() != self.image_size || image.width() != self.image_size {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, backend expects {}x{}",
                image.height(),
                image.width(),
                self.image_size,
                self.image_size
            )));
        }
        let stride = self.handle.encoder_stride;
        let side = self.image_size / stride;
        let patch_dim = stride * stride * 3;
        let mut patches = Array2::<f64>::zeros((side * side, patch_dim));
        for pr in 0..side {
            for pc in 0..side {
                let mut row = patches.row_mut(pr * side + pc);
                let mut k = 0;
                for dy in 0..stride {
                    for dx in 0..stride {
                        for ch in 0..3 {
                            row[k] = image.pixels[[pr * stride + dy, pc * stride + dx, ch]] as f64;
                            k += 1;
                        }
                    }
                }
            }
        }
        let projected = patches.dot(&self.projection);
        let features = projected
            .into_shape_with_order((side, side, self.handle.embed_dim))
            .expect("patch grid reshapes to the feature map");
        Ok(FeatureMap { features, stride })
    }

    fn decode_masks(
        &self,
        _features: &FeatureMap,
        prompt_tokens: ArrayView2<f64>,
    ) -> Result<MaskLogits> {
        let planes = self.decode_planes(prompt_tokens)?;
        Ok(MaskLogits {
            logits: planes.mapv(|v| v as f32),
        })
    }

    fn parameter_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.projection.iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(self.sharpness.to_le_bytes());
        hex(&hasher.finalize()[..16])
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn desk() -> Config {
        Config::desk()
    }

    #[test]
    fn encode_shape_desk() {
        let backend = MockBackend::new(&desk());
        let fm = backend.encode_image(&ImageTensor::filled(128, 0.3)).unwrap();
        assert_eq!(fm.features.dim(), (8, 8, 32));
        assert_eq!(fm.stride, 16);
    }

    #[test]
    fn encode_shape_full_scale() {
        let backend = MockBackend::new(&Config::default());
        let fm = backend.encode_image(&ImageTensor::filled(1024, 0.5)).unwrap();
        assert_eq!(fm.features.dim(), (64, 64, 256));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = desk();
        let mut img = ImageTensor::filled(128, 0.2);
        img.pixels[[5, 7, 1]] = 0.9;
        let a = MockBackend::new(&cfg).encode_image(&img).unwrap();
        let b = MockBackend::new(&cfg).encode_image(&img).unwrap();
        assert!(a
            .features
            .iter()
            .zip(b.features.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let backend = MockBackend::new(&desk());
        assert!(backend.encode_image(&ImageTensor::filled(64, 0.0)).is_err());
    }

    #[test]
    fn zero_tokens_decode_to_empty() {
        let backend = MockBackend::new(&desk());
        let fm = backend.encode_image(&ImageTensor::filled(128, 0.0)).unwrap();
        let masks = backend.decode_masks(&fm, Array2::zeros((0, 32)).view()).unwrap();
        assert_eq!(masks.logits.dim(), (0, 128, 128));
    }

    #[test]
    fn wrong_token_width() {
        let backend = MockBackend::new(&desk());
        let fm = backend.encode_image(&ImageTensor::filled(128, 0.0)).unwrap();
        let err = backend.decode_masks(&fm, Array2::zeros((2, 31)).view()).unwrap_err();
        assert!(matches!(
            err,
            crate::error::Error::DimMismatch {
                expected: 32,
                got: 31
            }
        ));
    }

    #[test]
    fn full_scale_decode_shape() {
        let backend = MockBackend::new(&Config::default());
        let fm = FeatureMap {
            features: Array3::zeros((64, 64, 256)),
            stride: 16,
        };
        let masks = backend.decode_masks(&fm, Array2::zeros((25, 256)).view()).unwrap();
        assert_eq!(masks.logits.dim(), (25, 1024, 1024));
    }

    #[test]
    fn full_image_box_is_positive_everywhere() {
        let plane = render_soft_rect((0.5, 0.5, 1.0, 1.0), 50.0, 32);
        assert!(plane.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn center_logit_matches_min_expression() {
        // min(0.75 - 0.5, 0.5 - 0.25, ...) = 0.25
        let v = soft_rect_logit((0.5, 0.5, 0.5, 0.5), 50.0, 0.5, 0.5);
        assert!((v - 12.5).abs() < 1e-12);
        // Odd grid so a pixel center sits exactly at 0.5.
        let plane = render_soft_rect((0.5, 0.5, 0.5, 0.5), 50.0, 5);
        assert!((plane[[2, 2]] - 12.5).abs() < 1e-12);
    }

    #[test]
    fn edge_point_has_zero_logit() {
        assert_eq!(soft_rect_logit((0.5, 0.5, 0.5, 0.5), 50.0, 0.25, 0.5), 0.0);
        assert_eq!(soft_rect_logit((0.5, 0.5, 0.5, 0.5), 50.0, 0.5, 0.75), 0.0);
        assert!(soft_rect_logit((0.5, 0.5, 0.5, 0.5), 50.0, 0.1, 0.5) < 0.0);
    }

    #[test]
    fn degenerate_extent_is_clamped() {
        let plane = render_soft_rect((0.5, 0.5, 0.0, 0.0), 50.0, 16);
        assert!(plane.iter().any(|v| *v > 0.0));
    }

    #[test]
    fn zero_token_is_centered_half_box() {
        assert_eq!(invert_box_params(&[0.0; 4]), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn logit_round_trip() {
        let target = [0.2, 0.2, 0.6, 0.8];
        let token: Vec<f64> = target.iter().map(|p| logit(*p)).collect();
        let (cx, cy, w, h) = invert_box_params(&token);
        for (got, want) in [cx, cy, w, h].iter().zip(target) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn saturates_under_large_perturbation() {
        let mut token = vec![logit(0.3), 0.0, 0.0, 0.0];
        token[0] += 10.0;
        let (cx, ..) = invert_box_params(&token);
        assert!(cx > 0.99);
    }

    #[test]
    fn decode_is_order_preserving() {
        let backend = MockBackend::new(&desk());
        let mut tokens = Array2::zeros((3, 32));
        for (i, c) in [-1.0, 0.0, 1.0].iter().enumerate() {
            tokens[[i, 0]] = *c;
        }
        let planes = backend.decode_planes(tokens.view()).unwrap();
        for i in 0..3 {
            let single = backend.decode_planes(tokens.slice(s![i..i + 1, ..])).unwrap();
            assert_eq!(planes.slice(s![i, .., ..]), single.slice(s![0, .., ..]));
        }
    }

    #[test]
    fn checksum_is_stable() {
        let cfg = desk();
        assert_eq!(
            MockBackend::new(&cfg).parameter_checksum(),
            MockBackend::new(&cfg).parameter_checksum()
        );
    }
}
