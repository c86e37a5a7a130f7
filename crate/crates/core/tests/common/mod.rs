//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod metric_cases;

use ndarray::Array2;
use partseg::types::{StudentOutput, TargetSet, TeacherTarget};
use partseg::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every permutation of `0..n`, lexicographic.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                go(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Row-order sum of `costs[i][perm[i]]`.
pub fn perm_cost(costs: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| costs[[i, j]]).sum()
}

/// Exhaustive minimum and every permutation attaining it.
pub fn brute_force_assign(costs: &Array2<f64>) -> (f64, Vec<Vec<usize>>) {
    let mut best = f64::INFINITY;
    let mut arg = Vec::new();
    for p in permutations(costs.nrows()) {
        let c = perm_cost(costs, &p);
        if c < best {
            best = c;
            arg = vec![p];
        } else if c == best {
            arg.push(p);
        }
    }
    (best, arg)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn huber(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Matching cost written out directly from the definition.
pub fn oracle_costs(targets: &TargetSet, preds: &StudentOutput, cfg: &Config) -> Array2<f64> {
    let s = targets.targets.len();
    Array2::from_shape_fn((s, s), |(i, j)| {
        let t = &targets.targets[i];
        if t.category == cfg.num_categories {
            return 0.0;
        }
        let p = softmax(&preds.class_logits.row(j).to_vec())[t.category];
        let l2 = t
            .embedding
            .iter()
            .zip(preds.prompt_tokens.row(j))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        -cfg.alpha * p + cfg.beta * l2
    })
}

/// Loss under a fixed permutation.
pub fn oracle_loss_at(targets: &TargetSet, preds: &StudentOutput, perm: &[usize], cfg: &Config) -> f64 {
    let s = targets.targets.len();
    let mut sum = 0.0;
    for (i, t) in targets.targets.iter().enumerate() {
        let j = perm[i];
        let real = t.category != cfg.num_categories;
        let w = if real { 1.0 } else { cfg.eos_weight };
        let p = softmax(&preds.class_logits.row(j).to_vec());
        sum += cfg.lambda_cls * w * -p[t.category].ln();
        if real {
            let row = preds.prompt_tokens.row(j);
            let d = t.embedding.len() as f64;
            sum += cfg.lambda_reg * t.embedding.iter().zip(row).map(|(a, b)| huber(a - b)).sum::<f64>() / d;
        }
    }
    sum / s as f64
}

/// Loss at the exhaustive optimum. Panics if tied optima disagree on it.
pub fn oracle_loss(targets: &TargetSet, preds: &StudentOutput, cfg: &Config) -> f64 {
    let costs = oracle_costs(targets, preds, cfg);
    let (_, perms) = brute_force_assign(&costs);
    let losses: Vec<f64> = perms.iter().map(|p| oracle_loss_at(targets, preds, p, cfg)).collect();
    for l in &losses {
        assert!((l - losses[0]).abs() < 1e-12, "tied optima disagree: {losses:?}");
    }
    losses[0]
}

/// Small config for matching and loss instances.
pub fn loss_config(s: usize, c: usize, width: usize) -> Config {
    Config {
        num_queries: s,
        num_categories: c,
        embed_dim: width,
        eos_weight: 0.25,
        ..Config::desk()
    }
}

/// A random padded target set and prediction; embeddings span beyond the
/// smooth-L1 knee so both branches are exercised.
pub fn random_instance(r: &mut ChaCha8Rng, cfg: &Config) -> (TargetSet, StudentOutput) {
    let s = cfg.num_queries;
    let c = cfg.num_categories;
    let width = cfg.token_width();
    let num_real = r.random_range(0..=s);
    let mut targets: Vec<TeacherTarget> = (0..num_real)
        .map(|_| TeacherTarget {
            category: r.random_range(0..c),
            embedding: (0..width).map(|_| r.random_range(-2.0..2.0)).collect(),
        })
        .collect();
    targets.resize(
        s,
        TeacherTarget {
            category: c,
            embedding: vec![0.0; width],
        },
    );
    let preds = StudentOutput {
        class_logits: Array2::from_shape_fn((s, c + 1), |_| r.random_range(-3.0..3.0)),
        prompt_tokens: Array2::from_shape_fn((s, width), |_| r.random_range(-2.0..2.0)),
    };
    (
        TargetSet {
            targets,
            num_real,
            no_part: c,
        },
        preds,
    )
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut y = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let v = x[idx];
        y[idx] = v + h;
        let up = f(&y);
        y[idx] = v - h;
        let down = f(&y);
        y[idx] = v;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// `|a - b| / max(|a|, |b|, floor)` over all entries, worst case.
pub fn max_rel_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
