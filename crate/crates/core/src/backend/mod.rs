//! The frozen segmentation backend: an image encoder producing a
//! [`FeatureMap`] and a prompt-conditioned mask decoder producing one logit
//! plane per prompt group.
//!
//! Two implementations ship: [`MockBackend`], a deterministic geometric
//! stand-in with an analytic box decoder, and [`AdapterBackend`], which
//! delegates to an external executable so a pre-trained model can be
//! plugged in without linking it.

mod adapter;
mod mock;

use ndarray::{Array3, ArrayView2};

pub use adapter::AdapterBackend;
pub(crate) use mock::hex;
pub use mock::{
    invert_box_params, logit, render_soft_rect, sigmoid, soft_rect_logit, MockBackend,
};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::{FeatureMap, ImageTensor};

/// One full-resolution logit plane per decoded prompt group, `N x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub logits: Array3<f32>,
}

impl MaskLogits {
    pub fn empty(size: usize) -> Self {
        MaskLogits {
            logits: Array3::zeros((0, size, size)),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Identity and geometry of a loaded backend. `frozen` is always true: no
/// code path hands backend parameters to an optimizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendHandle {
    pub name: String,
    pub encoder_stride: usize,
    pub embed_dim: usize,
    pub frozen: bool,
}

pub trait Backend: Send + Sync {
    fn handle(&self) -> &BackendHandle;

    fn encode_image(&self, image: &ImageTensor) -> Result<FeatureMap>;

    /// Decodes `N` prompt groups, each a row of width `K * d`.
    fn decode_masks(&self, features: &FeatureMap, prompt_tokens: ArrayView2<f64>)
        -> Result<MaskLogits>;

    /// Digest of every backend parameter, for freeze checks.
    fn parameter_checksum(&self) -> String;
}

/// Builds a backend from a CLI spec: `mock` or `adapter:<path>`.
pub fn from_spec(spec: &str, cfg: &Config) -> Result<Box<dyn Backend>> {
    if spec == "mock" {
        return Ok(Box::new(MockBackend::new(cfg)));
    }
    if let Some(path) = spec.strip_prefix("adapter:") {
        return Ok(Box::new(AdapterBackend::connect(path.as_ref(), cfg)?));
    }
    Err(Error::Adapter(format!(
        "unknown backend {spec:?} (expected mock or adapter:<path>)"
    )))
}

pub(crate) fn check_token_width(tokens: &ArrayView2<f64>, cfg: &Config) -> Result<()> {
    if tokens.ncols() != cfg.token_width() {
        return Err(Error::DimMismatch {
            expected: cfg.token_width(),
            got: tokens.ncols(),
        });
    }
    Ok(())
}

pub(crate) fn check_token_width_of(width: usize, cfg: &Config) -> Result<()> {
    if width != cfg.token_width() {
        return Err(Error::DimMismatch {
            expected: cfg.token_width(),
            got: width,
        });
    }
    Ok(())
}
