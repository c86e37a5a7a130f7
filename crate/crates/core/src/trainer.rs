//! Distillation training: only the prompter is optimized, against the
//! matched set loss; the backend and teacher stay frozen.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::data::TrainingScope;
use crate::error::{Error, Result};
use crate::matching::{match_sets, LossTargets};
use crate::prompter::{features_tensor, to_array2, Dropout, Prompter, PrompterParams};
use crate::types::{FeatureMap, StudentOutput, TargetSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One encoded training image: frozen-encoder features and its padded
/// teacher targets.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeatureMap,
    pub targets: TargetSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

/// Adam first and second moments per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamMoments {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMeta {
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    /// Per-epoch mean losses; `step` holds the last step of the epoch.
    pub history: Vec<LossRecord>,
    pub backend_checksum: String,
    pub teacher_checksum: String,
    pub config_hash: String,
    pub config_text: String,
    pub num_parameters: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PrompterParams,
    pub moments: AdamMoments,
    pub meta: StateMeta,
}

impl TrainState {
    pub fn new(
        cfg: &Config,
        seed: u64,
        backend_checksum: &str,
        teacher_checksum: &str,
    ) -> Result<Self> {
        let params = PrompterParams::init(cfg, seed)?;
        let num_parameters = params.num_parameters();
        Ok(TrainState {
            params,
            moments: AdamMoments::default(),
            meta: StateMeta {
                epoch: 0,
                step: 0,
                seed,
                history: Vec::new(),
                backend_checksum: backend_checksum.to_string(),
                teacher_checksum: teacher_checksum.to_string(),
                config_hash: cfg.hash(),
                config_text: cfg.to_text(),
                num_parameters,
            },
        })
    }

    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.meta.config_text)
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.meta.history.iter().map(|r| r.total).collect()
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: LossRecord,
    /// Gradient L2 norm per parameter; absent gradients are recorded as 0.
    pub grad_norms: BTreeMap<String, f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One Adam update of the prompter on a batch; returns mean losses.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&TrainSample],
    cfg: &Config,
) -> Result<StepReport> {
    let _scope = TrainingScope::enter();
    let (epoch, step) = (state.meta.epoch, state.meta.step);
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty training batch".into()));
    }
    for s in batch {
        if s.targets.len() != cfg.num_queries {
            return Err(Error::ShapeMismatch(format!(
                "target set of {} for S = {}",
                s.targets.len(),
                cfg.num_queries
            )));
        }
    }
    let maps: Vec<FeatureMap> = batch.iter().map(|s| s.features.clone()).collect();
    let features = features_tensor(&maps)?;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(state.meta.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let drop = (cfg.dropout > 0.0).then(|| Dropout {
        rate: cfg.dropout,
        rng: &mut drop_rng,
    });
    let prompter = Prompter::new(&state.params, cfg);
    let (logits, tokens) = prompter.forward_tensor(&features, drop)?;

    let mut totals = Vec::with_capacity(batch.len());
    let (mut cls_sum, mut reg_sum) = (0.0, 0.0);
    for (b, sample) in batch.iter().enumerate() {
        let lb = logits.get(b)?;
        let tb = tokens.get(b)?;
        let preds = StudentOutput {
            class_logits: to_array2(&lb)?,
            prompt_tokens: to_array2(&tb)?,
        };
        let assignment = match_sets(&sample.targets, &preds, cfg).map_err(|e| match e {
            Error::NonFinite { row, col } => Error::NonFiniteLoss {
                epoch,
                step,
                detail: format!("non-finite matching cost at ({row}, {col}) in sample {b}"),
            },
            other => other,
        })?;
        let graph = LossTargets::new(&sample.targets, &assignment, cfg, DType::F64, &Device::Cpu)?;
        let (total, cls, reg) = graph.loss(&lb, &tb)?;
        cls_sum += scalar(&cls)?;
        reg_sum += scalar(&reg)?;
        totals.push(total);
    }
    let n = batch.len() as f64;
    let loss = (Tensor::stack(&totals, 0)?.sum_all()? / n)?;
    let total = scalar(&loss)?;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("total {total}, cls {}, reg {}", cls_sum / n, reg_sum / n),
        });
    }
    let grads = loss.backward()?;

    state.meta.step += 1;
    let t = state.meta.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let mut grad_norms = BTreeMap::new();
    for (name, var) in state.params.vars() {
        let count = var.elem_count();
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; count],
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                detail: format!("non-finite gradient for {name}"),
            });
        }
        grad_norms.insert(name.to_string(), g.iter().map(|v| v * v).sum::<f64>().sqrt());
        let m = state
            .moments
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; count]);
        let v = state
            .moments
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; count]);
        let mut p = var.flatten_all()?.to_vec1::<f64>()?;
        for i in 0..count {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        var.set(&Tensor::from_vec(p, var.dims(), var.device())?)?;
    }
    Ok(StepReport {
        loss: LossRecord {
            epoch,
            step,
            total,
            cls: cls_sum / n,
            reg: reg_sum / n,
        },
        grad_norms,
    })
}

/// Where `fit` writes its artifacts; all optional.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// Seeded sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d)));
    order.shuffle(&mut rng);
    order
}

/// Trains from `state` (fresh or resumed) until `cfg.epochs`.
pub fn fit(
    samples: &[TrainSample],
    cfg: &Config,
    mut state: TrainState,
    opts: &FitOptions,
) -> Result<TrainState> {
    if state.meta.config_hash != cfg.hash() {
        return Err(Error::VersionMismatch(format!(
            "state built for config {}, training with {}",
            state.meta.config_hash,
            cfg.hash()
        )));
    }
    if cfg.epochs <= state.meta.epoch {
        return Ok(state);
    }
    if samples.is_empty() {
        return Err(Error::ShapeMismatch("no training samples".into()));
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("loss.csv");
            let fresh = state.meta.step == 0 || !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)?;
            if fresh {
                writeln!(f, "epoch,step,total,cls,reg")?;
            }
            Some(BufWriter::new(f))
        }
        None => None,
    };
    while state.meta.epoch < cfg.epochs {
        let epoch = state.meta.epoch;
        let order = epoch_order(samples.len(), state.meta.seed, epoch);
        let (mut total, mut cls, mut reg) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let report = train_step(&mut state, &batch, cfg)?;
            let w = batch.len() as f64;
            total += report.loss.total * w;
            cls += report.loss.cls * w;
            reg += report.loss.reg * w;
            if let Some(f) = log.as_mut() {
                let r = report.loss;
                writeln!(f, "{},{},{},{},{}", r.epoch, r.step, r.total, r.cls, r.reg)?;
            }
        }
        let n = samples.len() as f64;
        let record = LossRecord {
            epoch,
            step: state.meta.step,
            total: total / n,
            cls: cls / n,
            reg: reg / n,
        };
        state.meta.history.push(record);
        state.meta.epoch += 1;
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  cls {:.5}  reg {:.5}",
                epoch + 1,
                record.total,
                record.cls,
                record.reg
            );
        }
        if let Some(f) = log.as_mut() {
            f.flush()?;
        }
        if let Some(dir) = &opts.out_dir {
            let done = state.meta.epoch;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save_checkpoint(&state, &dir.join(format!("checkpoint-{done:04}.psck")))?;
            }
            if done == cfg.epochs {
                save_checkpoint(&state, &dir.join("final.psck"))?;
            }
        }
    }
    Ok(state)
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    put_bytes(buf, name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Layout: magic, u32 version, config hash, JSON metadata, tensor table
/// (params then Adam moments), and a trailing SHA-256 of everything before.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut buf, state.meta.config_hash.as_bytes());
    put_bytes(&mut buf, &serde_json::to_vec(&state.meta)?);
    let flat = state.params.to_flat()?;
    let count = flat.len() + state.moments.m.len() + state.moments.v.len();
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for (name, dims, values) in &flat {
        put_tensor(&mut buf, &format!("param/{name}"), dims, values);
    }
    for (prefix, table) in [("adam_m", &state.moments.m), ("adam_v", &state.moments.v)] {
        for (name, values) in table {
            put_tensor(&mut buf, &format!("{prefix}/{name}"), &[values.len()], values);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptFile("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|n| *n <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile(format!("implausible length {n}")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
}

/// Loads a checkpoint. With `expected` set, the stored config hash must
/// match it.
pub fn load_checkpoint(path: &Path, expected: Option<&Config>) -> Result<TrainState> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 8 + 32 || &raw[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptFile(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = raw.split_at(raw.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: body, pos: 8 };
    let hash = String::from_utf8_lossy(cur.bytes()?).into_owned();
    if let Some(cfg) = expected {
        if hash != cfg.hash() {
            return Err(Error::VersionMismatch(format!(
                "checkpoint config hash {hash}, current config {}",
                cfg.hash()
            )));
        }
    }
    let meta: StateMeta = serde_json::from_slice(cur.bytes()?)
        .map_err(|e| Error::CorruptFile(format!("metadata: {e}")))?;
    let cfg = Config::parse(&meta.config_text)
        .map_err(|e| Error::CorruptFile(format!("stored config: {e}")))?;
    if cfg.hash() != hash {
        return Err(Error::CorruptFile("stored config does not match its hash".into()));
    }
    let params = PrompterParams::init(&cfg, meta.seed)?;
    let mut moments = AdamMoments::default();
    let count = cur.len()?;
    let mut seen = 0usize;
    for _ in 0..count {
        let name = String::from_utf8_lossy(cur.bytes()?).into_owned();
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.len()?);
        }
        let n: usize = dims.iter().product();
        let data = cur.take(n.checked_mul(8).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(p) = name.strip_prefix("param/") {
            let var = params
                .get(p)
                .ok_or_else(|| Error::CorruptFile(format!("unknown parameter {p}")))?;
            if var.dims() != dims.as_slice() {
                return Err(Error::CorruptFile(format!("{p} has shape {dims:?}")));
            }
            params.set(p, &values)?;
            seen += 1;
        } else if let Some(p) = name.strip_prefix("adam_m/") {
            moments.m.insert(p.to_string(), values);
        } else if let Some(p) = name.strip_prefix("adam_v/") {
            moments.v.insert(p.to_string(), values);
        } else {
            return Err(Error::CorruptFile(format!("unknown tensor {name}")));
        }
    }
    if seen != params.len() {
        return Err(Error::CorruptFile(format!(
            "{seen} of {} parameters present",
            params.len()
        )));
    }
    if cur.pos != body.len() {
        return Err(Error::CorruptFile("trailing bytes".into()));
    }
    Ok(TrainState {
        params,
        moments,
        meta,
    })
}
