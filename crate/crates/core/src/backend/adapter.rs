use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array3, ArrayView2, Ix3};
use sha2::{Digest, Sha256};

use super::mock::hex;
use super::{check_token_width, Backend, BackendHandle, MaskLogits};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensorio;
use crate::types::{FeatureMap, ImageTensor};

static CALLS: AtomicU64 = AtomicU64::new(0);

/// Delegates encoding and decoding to an external executable.
///
/// The executable is called as
///
/// ```text
/// <exe> info
/// <exe> encode <image.bin> <features.bin>
/// <exe> decode <features.bin> <tokens.bin> <masks.bin>
/// ```
///
/// `info` prints `name=`, `encoder_stride=` and `embed_dim=` lines. Tensors
/// are exchanged in the [`tensorio`] format: images `H x W x 3`, features
/// `h x w x d`, tokens `N x (K*d)`, masks `N x H x W`.
#[derive(Debug, Clone)]
pub struct AdapterBackend {
    handle: BackendHandle,
    exe: PathBuf,
    cfg: Config,
    checksum: String,
}

impl AdapterBackend {
    pub fn connect(exe: &Path, cfg: &Config) -> Result<Self> {
        let bytes = std::fs::read(exe)
            .map_err(|e| Error::Adapter(format!("cannot read {}: {e}", exe.display())))?;
        let out = Command::new(exe)
            .arg("info")
            .output()
            .map_err(|e| Error::Adapter(format!("cannot run {}: {e}", exe.display())))?;
        if !out.status.success() {
            return Err(Error::Adapter(format!(
                "info failed: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let mut name = None;
        let mut stride = None;
        let mut dim = None;
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "name" => name = Some(v.trim().to_string()),
                    "encoder_stride" => stride = v.trim().parse::<usize>().ok(),
                    "embed_dim" => dim = v.trim().parse::<usize>().ok(),
                    _ => {}
                }
            }
        }
        let (Some(name), Some(encoder_stride), Some(embed_dim)) = (name, stride, dim) else {
            return Err(Error::Adapter(format!("incomplete info output: {text:?}")));
        };
        if encoder_stride != cfg.encoder_stride || embed_dim != cfg.embed_dim {
            return Err(Error::Adapter(format!(
                "adapter reports stride {encoder_stride}, dim {embed_dim}; config has {}, {}",
                cfg.encoder_stride, cfg.embed_dim
            )));
        }
        Ok(AdapterBackend {
            handle: BackendHandle {
                name,
                encoder_stride,
                embed_dim,
                frozen: true,
            },
            exe: exe.to_path_buf(),
            cfg: cfg.clone(),
            checksum: hex(&Sha256::digest(&bytes)[..16]),
        })
    }

    fn scratch(&self, tag: &str) -> PathBuf {
        let n = CALLS.fetch_add(1, Ordering::Relaxed);
        std::env::temp_dir().join(format!("partseg-{}-{n}-{tag}.bin", std::process::id()))
    }

    fn run(&self, args: &[&Path], verb: &str) -> Result<()> {
        let out = Command::new(&self.exe)
            .arg(verb)
            .args(args)
            .output()
            .map_err(|e| Error::Adapter(format!("{verb}: {e}")))?;
        if !out.status.success() {
            return Err(Error::Adapter(format!(
                "{verb} failed: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(())
    }
}

struct Scratch(Vec<PathBuf>);

impl Drop for Scratch {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = std::fs::remove_file(p);
        }
    }
}

impl Backend for AdapterBackend {
    fn handle(&self) -> &BackendHandle {
        &self.handle
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<FeatureMap> {
        image.check_size(&self.cfg)?;
        let files = Scratch(vec![self.scratch("image"), self.scratch("features")]);
        tensorio::write_f32(&files.0[0], &image.pixels.clone().into_dyn())?;
        self.run(&[&files.0[0], &files.0[1]], "encode")?;
        let features = tensorio::read(&files.0[1])?
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::Adapter(format!("features: {e}")))?;
        let side = self.cfg.feature_side();
        if features.dim() != (side, side, self.cfg.embed_dim) {
            return Err(Error::ShapeMismatch(format!(
                "adapter features {:?}, expected ({side}, {side}, {})",
                features.dim(),
                self.cfg.embed_dim
            )));
        }
        Ok(FeatureMap {
            features,
            stride: self.cfg.encoder_stride,
        })
    }

    fn decode_masks(
        &self,
        features: &FeatureMap,
        prompt_tokens: ArrayView2<f64>,
    ) -> Result<MaskLogits> {
        check_token_width(&prompt_tokens, &self.cfg)?;
        if prompt_tokens.nrows() == 0 {
            return Ok(MaskLogits::empty(self.cfg.image_size));
        }
        let files = Scratch(vec![
            self.scratch("features"),
            self.scratch("tokens"),
            self.scratch("masks"),
        ]);
        tensorio::write_f64(&files.0[0], &features.features.clone().into_dyn())?;
        tensorio::write_f64(&files.0[1], &prompt_tokens.to_owned().into_dyn())?;
        self.run(&[&files.0[0], &files.0[1], &files.0[2]], "decode")?;
        let masks: Array3<f64> = tensorio::read(&files.0[2])?
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::Adapter(format!("masks: {e}")))?;
        let size = self.cfg.image_size;
        if masks.dim() != (prompt_tokens.nrows(), size, size) {
            return Err(Error::ShapeMismatch(format!(
                "adapter masks {:?}, expected ({}, {size}, {size})",
                masks.dim(),
                prompt_tokens.nrows()
            )));
        }
        Ok(MaskLogits {
            logits: masks.mapv(|v| v as f32),
        })
    }

    fn parameter_checksum(&self) -> String {
        self.checksum.clone()
    }
}
