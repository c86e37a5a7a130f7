//! The trainable student prompter.
//!
//! Features are reduced by two 3x3 stride-2 convolutions, flattened, given
//! fixed 2D sine position codes and passed through a pre-norm transformer
//! encoder. `S` learned queries are decoded against that memory and each
//! query is mapped independently to class logits and a prompt token.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::backend::check_token_width_of;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::{FeatureMap, StudentOutput};

const LN_EPS: f64 = 1e-5;
const QUERY_STD: f64 = 0.1;

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone)]
pub struct PrompterParams {
    vars: BTreeMap<String, Var>,
}

impl PrompterParams {
    pub fn init(cfg: &Config, seed: u64) -> Result<Self> {
        let d = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            vars: BTreeMap::new(),
            rng: &mut rng,
        };
        let fan = 9 * d;
        for conv in ["conv1", "conv2"] {
            b.normal(&format!("{conv}.weight"), &[d, d, 3, 3], (2.0 / fan as f64).sqrt())?;
            b.zeros(&format!("{conv}.bias"), &[d])?;
        }
        for l in 0..cfg.encoder_layers {
            let p = format!("encoder.{l}");
            b.layer_norm(&format!("{p}.norm1"), d)?;
            b.attention(&format!("{p}.self_attn"), d)?;
            b.layer_norm(&format!("{p}.norm2"), d)?;
            b.ffn(&format!("{p}.ffn"), d, d * cfg.ffn_mult)?;
        }
        b.layer_norm("encoder.norm", d)?;
        b.normal("queries", &[cfg.num_queries, d], QUERY_STD)?;
        for l in 0..cfg.decoder_layers {
            let p = format!("decoder.{l}");
            b.layer_norm(&format!("{p}.norm1"), d)?;
            b.attention(&format!("{p}.self_attn"), d)?;
            b.layer_norm(&format!("{p}.norm2"), d)?;
            b.attention(&format!("{p}.cross_attn"), d)?;
            b.layer_norm(&format!("{p}.norm3"), d)?;
            b.ffn(&format!("{p}.ffn"), d, d * cfg.ffn_mult)?;
        }
        b.layer_norm("decoder.norm", d)?;
        b.mlp("class_head", d, cfg.num_categories + 1, cfg.class_head_layers)?;
        b.mlp("prompt_head", d, cfg.token_width(), cfg.prompt_head_layers)?;
        Ok(PrompterParams { vars: b.vars })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn t(&self, name: &str) -> &Tensor {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .as_tensor()
    }

    /// Values as flat vectors with their shapes, in name order.
    pub fn to_flat(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                Ok((
                    k.clone(),
                    v.dims().to_vec(),
                    v.flatten_all()?.to_vec1::<f64>()?,
                ))
            })
            .collect()
    }

    /// Overwrites one tensor in place.
    pub fn set(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name}")))?;
        if values.len() != var.elem_count() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {} values for {:?}",
                values.len(),
                var.dims()
            )));
        }
        var.set(&Tensor::from_slice(values, var.dims(), var.device())?)?;
        Ok(())
    }

    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(PrompterParams { vars })
    }

    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, dims, values) in self.to_flat()? {
            h.update(name.as_bytes());
            for d in dims {
                h.update((d as u64).to_le_bytes());
            }
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(crate::backend::hex(&h.finalize()[..16]))
    }
}

struct Builder<'a> {
    vars: BTreeMap<String, Var>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn put(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        self.vars
            .insert(name.to_string(), Var::from_vec(values, shape, &Device::Cpu)?);
        Ok(())
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.put(name, shape, vec![0.0; shape.iter().product()])
    }

    fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.put(name, shape, vec![1.0; shape.iter().product()])
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let v = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.put(name, shape, v)
    }

    /// Weights stored `in x out`.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("valid range");
        let v = (0..fan_in * fan_out).map(|_| self.rng.sample(dist)).collect();
        self.put(&format!("{name}.weight"), &[fan_in, fan_out], v)?;
        self.zeros(&format!("{name}.bias"), &[fan_out])
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.ones(&format!("{name}.gain"), &[d])?;
        self.zeros(&format!("{name}.bias"), &[d])
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<()> {
        for p in ["q", "k", "v", "out"] {
            self.linear(&format!("{name}.{p}"), d, d)?;
        }
        Ok(())
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Result<()> {
        self.linear(&format!("{name}.fc1"), d, hidden)?;
        self.linear(&format!("{name}.fc2"), hidden, d)
    }

    fn mlp(&mut self, name: &str, d: usize, out: usize, layers: usize) -> Result<()> {
        for l in 0..layers {
            let o = if l + 1 == layers { out } else { d };
            self.linear(&format!("{name}.{l}"), d, o)?;
        }
        Ok(())
    }
}

/// Fixed 2D sine position codes for an `h x w` grid, one row per cell in
/// row-major order. The first half of the channels encodes y, the second x.
pub fn position_encoding(h: usize, w: usize, d: usize) -> Array2<f64> {
    let half = d / 2;
    let mut out = Array2::zeros((h * w, d));
    let scale = 2.0 * std::f64::consts::PI;
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for (offset, pos) in [(0, (y as f64 + 0.5) / h as f64), (half, (x as f64 + 0.5) / w as f64)] {
                for c in 0..half {
                    let freq = 10000f64.powf((2 * (c / 2)) as f64 / half as f64);
                    let arg = pos * scale / freq;
                    out[[row, offset + c]] = if c % 2 == 0 { arg.sin() } else { arg.cos() };
                }
            }
        }
    }
    out
}

/// Dropout applied during training; `None` means deterministic evaluation.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

pub struct Prompter<'p> {
    params: &'p PrompterParams,
    cfg: Config,
}

impl<'p> Prompter<'p> {
    pub fn new(params: &'p PrompterParams, cfg: &Config) -> Self {
        Prompter {
            params,
            cfg: cfg.clone(),
        }
    }

    fn linear(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.params.t(&format!("{name}.weight"));
        let b = self.params.t(&format!("{name}.bias"));
        Ok(x.broadcast_matmul(w)?.broadcast_add(b)?)
    }

    fn layer_norm(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.params.t(&format!("{name}.gain")))?
            .broadcast_add(self.params.t(&format!("{name}.bias")))?)
    }

    fn dropout(&self, x: Tensor, drop: &mut Option<Dropout>) -> Result<Tensor> {
        match drop {
            Some(Dropout { rate, rng }) if *rate > 0.0 => {
                let keep = 1.0 - *rate;
                let mask: Vec<f64> = (0..x.elem_count())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = Tensor::from_vec(mask, x.dims(), x.device())?;
                Ok((x * mask)?)
            }
            _ => Ok(x),
        }
    }

    /// Multi-head attention; `q_in` is `(B, N, d)`, `kv` is `(B, M, d)`.
    fn attention(&self, name: &str, q_in: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let (b, n, d) = q_in.dims3()?;
        let m = kv.dim(1)?;
        let h = self.cfg.num_heads;
        let dh = d / h;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.linear(&format!("{name}.q"), q_in)?, n)?;
        let k = split(self.linear(&format!("{name}.k"), kv)?, m)?;
        let v = split(self.linear(&format!("{name}.v"), kv)?, m)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        self.linear(&format!("{name}.out"), &ctx)
    }

    fn ffn(&self, name: &str, x: &Tensor, drop: &mut Option<Dropout>) -> Result<Tensor> {
        let hidden = self.linear(&format!("{name}.fc1"), x)?.relu()?;
        let hidden = self.dropout(hidden, drop)?;
        self.linear(&format!("{name}.fc2"), &hidden)
    }

    fn mlp(&self, name: &str, x: &Tensor, layers: usize) -> Result<Tensor> {
        let mut x = x.clone();
        for l in 0..layers {
            x = self.linear(&format!("{name}.{l}"), &x)?;
            if l + 1 < layers {
                x = x.relu()?;
            }
        }
        Ok(x)
    }

    /// `(B, h, w, d)` features to `(B, h/4 * w/4, d)` tokens, row-major.
    pub fn downsample(&self, features: &Tensor) -> Result<Tensor> {
        let (_, h, w, d) = features.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map {h}x{w} is not divisible by 4"
            )));
        }
        if d != self.cfg.embed_dim {
            return Err(Error::DimMismatch {
                expected: self.cfg.embed_dim,
                got: d,
            });
        }
        let x = features.permute((0, 3, 1, 2))?.contiguous()?;
        let x = x
            .conv2d(self.params.t("conv1.weight"), 1, 2, 1, 1)?
            .broadcast_add(&self.params.t("conv1.bias").reshape((1, d, 1, 1))?)?
            .relu()?;
        let x = x
            .conv2d(self.params.t("conv2.weight"), 1, 2, 1, 1)?
            .broadcast_add(&self.params.t("conv2.bias").reshape((1, d, 1, 1))?)?;
        let (b, _, rh, rw) = x.dims4()?;
        Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?.reshape((b, rh * rw, d))?)
    }

    /// Transformer and heads over already flattened tokens with their
    /// position codes. Returns logits `(B, S, C+1)` and tokens `(B, S, K*d)`.
    pub fn decode_tokens(
        &self,
        tokens: &Tensor,
        pos: &Tensor,
        mut drop: Option<Dropout>,
    ) -> Result<(Tensor, Tensor)> {
        let b = tokens.dim(0)?;
        let mut x = tokens.broadcast_add(pos)?;
        for l in 0..self.cfg.encoder_layers {
            let p = format!("encoder.{l}");
            let n = self.layer_norm(&format!("{p}.norm1"), &x)?;
            let a = self.attention(&format!("{p}.self_attn"), &n, &n)?;
            x = (x + self.dropout(a, &mut drop)?)?;
            let n = self.layer_norm(&format!("{p}.norm2"), &x)?;
            let f = self.ffn(&format!("{p}.ffn"), &n, &mut drop)?;
            x = (x + self.dropout(f, &mut drop)?)?;
        }
        let memory = self.layer_norm("encoder.norm", &x)?;

        let queries = self.params.t("queries");
        let (s, d) = queries.dims2()?;
        let mut q = queries.unsqueeze(0)?.broadcast_as((b, s, d))?.contiguous()?;
        for l in 0..self.cfg.decoder_layers {
            let p = format!("decoder.{l}");
            let n = self.layer_norm(&format!("{p}.norm1"), &q)?;
            let a = self.attention(&format!("{p}.self_attn"), &n, &n)?;
            q = (q + self.dropout(a, &mut drop)?)?;
            let n = self.layer_norm(&format!("{p}.norm2"), &q)?;
            let a = self.attention(&format!("{p}.cross_attn"), &n, &memory)?;
            q = (q + self.dropout(a, &mut drop)?)?;
            let n = self.layer_norm(&format!("{p}.norm3"), &q)?;
            let f = self.ffn(&format!("{p}.ffn"), &n, &mut drop)?;
            q = (q + self.dropout(f, &mut drop)?)?;
        }
        let q = self.layer_norm("decoder.norm", &q)?;
        let logits = self.mlp("class_head", &q, self.cfg.class_head_layers)?;
        let prompts = self.mlp("prompt_head", &q, self.cfg.prompt_head_layers)?;
        Ok((logits, prompts))
    }

    /// Batched forward on `(B, h, w, d)` features.
    pub fn forward_tensor(
        &self,
        features: &Tensor,
        drop: Option<Dropout>,
    ) -> Result<(Tensor, Tensor)> {
        let tokens = self.downsample(features)?;
        let (_, h, w, d) = features.dims4()?;
        let pe = position_encoding(h / 4, w / 4, d);
        let pos = Tensor::from_vec(pe.into_raw_vec_and_offset().0, ((h / 4) * (w / 4), d), &Device::Cpu)?
            .to_dtype(features.dtype())?;
        self.decode_tokens(&tokens, &pos, drop)
    }

    pub fn forward(&self, features: &FeatureMap) -> Result<StudentOutput> {
        let t = features_tensor(std::slice::from_ref(features))?;
        let (logits, prompts) = self.forward_tensor(&t, None)?;
        let logits = to_array2(&logits.squeeze(0)?)?;
        let prompts = to_array2(&prompts.squeeze(0)?)?;
        check_token_width_of(prompts.ncols(), &self.cfg)?;
        Ok(StudentOutput {
            class_logits: logits,
            prompt_tokens: prompts,
        })
    }
}

/// Numerically stable softmax over the last axis, built from primitives so
/// it differentiates.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Stacks feature maps into a `(B, h, w, d)` f64 tensor.
pub fn features_tensor(maps: &[FeatureMap]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty feature batch".into()))?;
    let dim = first.features.dim();
    let mut data = Vec::with_capacity(maps.len() * dim.0 * dim.1 * dim.2);
    for m in maps {
        if m.features.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "feature maps {:?} and {:?} in one batch",
                dim,
                m.features.dim()
            )));
        }
        data.extend(m.features.iter().cloned());
    }
    Ok(Tensor::from_vec(data, (maps.len(), dim.0, dim.1, dim.2), &Device::Cpu)?)
}

pub fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((r, c), v).expect("tensor shape"))
}

/// Reduced map `(h/4, w/4, d)` for one feature map.
pub fn downsample_features(
    features: &FeatureMap,
    params: &PrompterParams,
    cfg: &Config,
) -> Result<Array3<f64>> {
    let (h, w) = features.side();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "feature map {h}x{w} is not divisible by 4"
        )));
    }
    let t = Prompter::new(params, cfg).downsample(&features_tensor(std::slice::from_ref(features))?)?;
    let d = t.dim(2)?;
    let v = t.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array3::from_shape_vec((h / 4, w / 4, d), v).expect("tensor shape"))
}

pub fn prompter_forward(
    features: &FeatureMap,
    params: &PrompterParams,
    cfg: &Config,
) -> Result<StudentOutput> {
    Prompter::new(params, cfg).forward(features)
}
