//! Set matching and the distillation loss.
//!
//! Targets `y_i = (c_i, p_i)` are matched one-to-one to predictions by the
//! permutation minimizing the summed pairwise cost
//!
//! ```text
//! C(y_i, ŷ_j) = 1{c_i != ∅} * (-alpha * softmax(logits_j)[c_i] + beta * ||p_i - tokens_j||_2)
//! ```
//!
//! and the loss over the matched pairs is
//!
//! ```text
//! L = (1/S) * sum_i (lambda_cls * w_i * CE_i + 1{c_i != ∅} * lambda_reg * SmoothL1_i)
//! ```
//!
//! where `w_i` is `eos_weight` for no-part targets and 1 otherwise. The
//! assignment is treated as a constant when differentiating.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::{Assignment, StudentOutput, TargetSet};

/// `costs[i][j]` is the cost of giving target `i` prediction `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub costs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `(1/S) * sum_i lambda_cls * w_i * CE_i`
    pub cls: f64,
    /// `(1/S) * sum_{real i} lambda_reg * SmoothL1_i`; `cls + reg == total`.
    pub reg: f64,
    /// Per-target summand, indexed by target.
    pub per_query: Vec<f64>,
}

fn check_shapes(targets: &TargetSet, preds: &StudentOutput, cfg: &Config) -> Result<()> {
    let s = targets.len();
    if preds.class_logits.dim() != (s, cfg.num_categories + 1) {
        return Err(Error::ShapeMismatch(format!(
            "class logits {:?}, expected ({s}, {})",
            preds.class_logits.dim(),
            cfg.num_categories + 1
        )));
    }
    if preds.prompt_tokens.nrows() != s {
        return Err(Error::ShapeMismatch(format!(
            "{} prompt rows for {s} targets",
            preds.prompt_tokens.nrows()
        )));
    }
    for t in &targets.targets {
        if t.embedding.len() != preds.prompt_tokens.ncols() {
            return Err(Error::DimMismatch {
                expected: preds.prompt_tokens.ncols(),
                got: t.embedding.len(),
            });
        }
    }
    Ok(())
}

pub fn pairwise_cost(targets: &TargetSet, preds: &StudentOutput, cfg: &Config) -> Result<CostMatrix> {
    check_shapes(targets, preds, cfg)?;
    let s = targets.len();
    let probs = preds.class_probs();
    let mut costs = Array2::zeros((s, s));
    for (i, target) in targets.targets.iter().enumerate() {
        if target.category == targets.no_part {
            continue;
        }
        for j in 0..s {
            let dist = target
                .embedding
                .iter()
                .zip(preds.prompt_tokens.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            costs[[i, j]] = -cfg.alpha * probs[[j, target.category]] + cfg.beta * dist;
        }
    }
    Ok(CostMatrix { costs })
}

/// Minimum-cost perfect matching on a square matrix.
///
/// Shortest augmenting paths with row/column potentials, O(n^3). Rows are
/// inserted in index order and the lowest column index wins ties, which
/// makes the result deterministic; an all-equal matrix yields the identity.
pub fn hungarian_assign(costs: &CostMatrix) -> Result<Assignment> {
    let (n, m) = costs.costs.dim();
    if n != m {
        return Err(Error::ShapeMismatch(format!("cost matrix is {n}x{m}, expected square")));
    }
    for ((r, c), v) in costs.costs.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row: r, col: c });
        }
    }
    if n == 0 {
        return Ok(Assignment {
            target_to_pred: Vec::new(),
            total_cost: 0.0,
        });
    }
    let a = &costs.costs;
    // 1-based internals; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut target_to_pred = vec![0usize; n];
    for j in 1..=n {
        target_to_pred[col_owner[j] - 1] = j - 1;
    }
    canonicalize_identical_rows(a, &mut target_to_pred);
    let total_cost = target_to_pred
        .iter()
        .enumerate()
        .map(|(i, &j)| a[[i, j]])
        .sum();
    Ok(Assignment {
        target_to_pred,
        total_cost,
    })
}

/// Rows with bitwise-equal costs (no-part pads) are interchangeable; hand
/// their columns out in ascending order so earlier rows get lower columns.
fn canonicalize_identical_rows(a: &Array2<f64>, target_to_pred: &mut [usize]) {
    let n = target_to_pred.len();
    let mut grouped = vec![false; n];
    for i in 0..n {
        if grouped[i] {
            continue;
        }
        let rows: Vec<usize> = (i..n)
            .filter(|&k| !grouped[k] && a.row(k).iter().zip(a.row(i)).all(|(x, y)| x.to_bits() == y.to_bits()))
            .collect();
        let mut cols: Vec<usize> = rows.iter().map(|&k| target_to_pred[k]).collect();
        cols.sort_unstable();
        for (&k, c) in rows.iter().zip(cols) {
            grouped[k] = true;
            target_to_pred[k] = c;
        }
    }
}

pub fn match_sets(targets: &TargetSet, preds: &StudentOutput, cfg: &Config) -> Result<Assignment> {
    hungarian_assign(&pairwise_cost(targets, preds, cfg)?)
}

fn check_assignment(assignment: &Assignment, s: usize) -> Result<()> {
    let mut seen = vec![false; s];
    if assignment.target_to_pred.len() != s {
        return Err(Error::ShapeMismatch("assignment length differs from S".into()));
    }
    for &j in &assignment.target_to_pred {
        if j >= s || std::mem::replace(&mut seen[j], true) {
            return Err(Error::ShapeMismatch("assignment is not a permutation".into()));
        }
    }
    Ok(())
}

fn cross_entropy(logits: ndarray::ArrayView1<f64>, class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[class]
}

/// Elementwise Huber with unit transition, averaged over coordinates.
pub fn smooth_l1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let r = (x - y).abs();
            if r < 1.0 {
                0.5 * r * r
            } else {
                r - 0.5
            }
        })
        .sum();
    sum / a.len() as f64
}

fn class_weight(targets: &TargetSet, i: usize, cfg: &Config) -> f64 {
    if targets.is_real(i) {
        1.0
    } else {
        cfg.eos_weight
    }
}

/// Mean over all `S` targets of the weighted cross-entropy of the matched
/// prediction, no-part targets included.
pub fn classification_loss(
    targets: &TargetSet,
    preds: &StudentOutput,
    assignment: &Assignment,
    cfg: &Config,
) -> Result<f64> {
    check_shapes(targets, preds, cfg)?;
    check_assignment(assignment, targets.len())?;
    let s = targets.len();
    if s == 0 {
        return Ok(0.0);
    }
    let sum: f64 = (0..s)
        .map(|i| {
            let j = assignment.target_to_pred[i];
            class_weight(targets, i, cfg)
                * cross_entropy(preds.class_logits.row(j), targets.targets[i].category)
        })
        .sum();
    Ok(sum / s as f64)
}

/// Mean over real targets of the smooth-L1 embedding distance; zero when
/// the set has no real targets.
pub fn regression_loss(
    targets: &TargetSet,
    preds: &StudentOutput,
    assignment: &Assignment,
    cfg: &Config,
) -> Result<f64> {
    check_shapes(targets, preds, cfg)?;
    check_assignment(assignment, targets.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, target) in targets.targets.iter().enumerate() {
        if !targets.is_real(i) {
            continue;
        }
        let row = preds.prompt_tokens.row(assignment.target_to_pred[i]).to_vec();
        sum += smooth_l1(&target.embedding, &row);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Loss under a given assignment.
pub fn loss_with_assignment(
    targets: &TargetSet,
    preds: &StudentOutput,
    assignment: &Assignment,
    cfg: &Config,
) -> Result<LossBreakdown> {
    check_shapes(targets, preds, cfg)?;
    check_assignment(assignment, targets.len())?;
    let s = targets.len();
    let mut per_query = Vec::with_capacity(s);
    let (mut cls, mut reg) = (0.0, 0.0);
    for (i, target) in targets.targets.iter().enumerate() {
        let j = assignment.target_to_pred[i];
        let c = cfg.lambda_cls
            * class_weight(targets, i, cfg)
            * cross_entropy(preds.class_logits.row(j), target.category);
        let r = if targets.is_real(i) {
            cfg.lambda_reg * smooth_l1(&target.embedding, &preds.prompt_tokens.row(j).to_vec())
        } else {
            0.0
        };
        cls += c;
        reg += r;
        per_query.push(c + r);
    }
    let scale = if s == 0 { 0.0 } else { 1.0 / s as f64 };
    Ok(LossBreakdown {
        total: per_query.iter().sum::<f64>() * scale,
        cls: cls * scale,
        reg: reg * scale,
        per_query,
    })
}

/// Matches, then evaluates the loss.
pub fn total_loss(
    targets: &TargetSet,
    preds: &StudentOutput,
    cfg: &Config,
) -> Result<(LossBreakdown, Assignment)> {
    let assignment = match_sets(targets, preds, cfg)?;
    let loss = loss_with_assignment(targets, preds, &assignment, cfg)?;
    Ok((loss, assignment))
}

/// Constant inputs of the differentiable loss for one image.
pub struct LossTargets {
    /// Prediction index for each target, as a `u32` tensor of length `S`.
    order: Tensor,
    onehot: Tensor,
    embeddings: Tensor,
    cls_weights: Tensor,
    reg_weights: Tensor,
    size: usize,
}

impl LossTargets {
    pub fn new(
        targets: &TargetSet,
        assignment: &Assignment,
        cfg: &Config,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let s = targets.len();
        check_assignment(assignment, s)?;
        let classes = cfg.num_categories + 1;
        let width = cfg.token_width();
        let order: Vec<u32> = assignment.target_to_pred.iter().map(|&j| j as u32).collect();
        let mut onehot = vec![0.0f64; s * classes];
        let mut embeddings = Vec::with_capacity(s * width);
        let mut cls_weights = Vec::with_capacity(s);
        let mut reg_weights = Vec::with_capacity(s);
        for (i, t) in targets.targets.iter().enumerate() {
            onehot[i * classes + t.category] = 1.0;
            embeddings.extend_from_slice(&t.embedding);
            cls_weights.push(cfg.lambda_cls * class_weight(targets, i, cfg));
            reg_weights.push(if targets.is_real(i) { cfg.lambda_reg } else { 0.0 });
        }
        let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(LossTargets {
            order: Tensor::from_vec(order, s, device)?,
            onehot: t(onehot, &[s, classes])?,
            embeddings: t(embeddings, &[s, width])?,
            cls_weights: t(cls_weights, &[s])?,
            reg_weights: t(reg_weights, &[s])?,
            size: s,
        })
    }

    /// Scalar loss for one image's `(S, C+1)` logits and `(S, K*d)` tokens.
    /// Returns `(total, cls, reg)`.
    pub fn loss(&self, logits: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let logits = logits.index_select(&self.order, 0)?;
        let tokens = tokens.index_select(&self.order, 0)?;
        let max = logits.max_keepdim(1)?.detach();
        let shifted = logits.broadcast_sub(&max)?;
        let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
        let log_probs = shifted.broadcast_sub(&lse)?;
        let ce = (log_probs * &self.onehot)?.sum(1)?.neg()?;
        let cls = (ce * &self.cls_weights)?.sum_all()?;

        let r = (tokens - &self.embeddings)?.abs()?;
        let m = r.minimum(1.0)?;
        let huber = ((m.sqr()? * 0.5)? + (r - m)?)?.mean(1)?;
        let reg = (huber * &self.reg_weights)?.sum_all()?;

        let scale = 1.0 / self.size as f64;
        let cls = (cls * scale)?;
        let reg = (reg * scale)?;
        Ok(((&cls + &reg)?, cls, reg))
    }
}

/// Loss and its gradients with respect to logits and tokens, the assignment
/// held fixed at the optimum for `preds`.
pub fn total_loss_gradients(
    targets: &TargetSet,
    preds: &StudentOutput,
    cfg: &Config,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    let (breakdown, assignment) = total_loss(targets, preds, cfg)?;
    let device = Device::Cpu;
    let to_var = |a: &Array2<f64>| -> Result<Var> {
        Ok(Var::from_vec(a.iter().cloned().collect::<Vec<_>>(), a.dim(), &device)?)
    };
    let logits = to_var(&preds.class_logits)?;
    let tokens = to_var(&preds.prompt_tokens)?;
    let graph = LossTargets::new(targets, &assignment, cfg, DType::F64, &device)?;
    let (total, _, _) = graph.loss(logits.as_tensor(), tokens.as_tensor())?;
    let grads = total.backward()?;
    let take = |v: &Var, dim: (usize, usize)| -> Result<Array2<f64>> {
        let g = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; dim.0 * dim.1],
        };
        Ok(Array2::from_shape_vec(dim, g).expect("gradient shape"))
    };
    let dl = take(&logits, preds.class_logits.dim())?;
    let dt = take(&tokens, preds.prompt_tokens.dim())?;
    Ok((breakdown, dl, dt))
}
