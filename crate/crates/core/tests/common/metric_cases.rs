//! Constructed 8x8 metric cases and a set-based tally oracle.

use std::collections::HashSet;

use ndarray::Array2;
use partseg::evaluation::{compute_macc, compute_miou, ConfusionAccumulator};
use partseg::types::SemanticSegmentation;

pub type Pairs = Vec<(SemanticSegmentation, SemanticSegmentation)>;

pub const BG: u16 = 3;

pub fn seg(f: impl Fn(usize, usize) -> u16) -> SemanticSegmentation {
    SemanticSegmentation {
        labels: Array2::from_shape_fn((8, 8), |(y, x)| f(y, x)),
        scores: None,
        background: BG,
    }
}

/// Set-based tallies over a list of image pairs.
pub fn brute(pairs: &[(SemanticSegmentation, SemanticSegmentation)], c: usize) -> (Option<f64>, Option<f64>) {
    let mut ious = Vec::new();
    let mut accs = Vec::new();
    for k in 0..c as u16 {
        let mut gt = HashSet::new();
        let mut pred = HashSet::new();
        for (n, (g, p)) in pairs.iter().enumerate() {
            for ((y, x), &v) in g.labels.indexed_iter() {
                if v == k {
                    gt.insert((n, y, x));
                }
            }
            for ((y, x), &v) in p.labels.indexed_iter() {
                if v == k {
                    pred.insert((n, y, x));
                }
            }
        }
        let inter = gt.intersection(&pred).count() as f64;
        let union = gt.union(&pred).count() as f64;
        if union > 0.0 {
            ious.push(inter / union);
        }
        if !gt.is_empty() {
            accs.push(inter / gt.len() as f64);
        }
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (mean(ious), mean(accs))
}

pub fn ours(pairs: &[(SemanticSegmentation, SemanticSegmentation)], c: usize) -> (Option<f64>, Option<f64>) {
    let mut acc = ConfusionAccumulator::new(c);
    for (g, p) in pairs {
        acc.accumulate(g, p).unwrap();
    }
    (compute_miou(&acc).ok(), compute_macc(&acc).ok())
}

/// Ten constructed cases with hand-derived `(mIoU, mACC)`.
pub fn cases() -> Vec<(&'static str, Pairs, (f64, f64))> {
    let half = seg(|y, _| if y < 4 { 0 } else { BG });
    let quads = seg(|y, x| match (y < 4, x < 4) {
        (true, true) => 0,
        (true, false) => 1,
        (false, true) => 2,
        _ => BG,
    });
    vec![
        ("identity", vec![(quads.clone(), quads.clone())], (1.0, 1.0)),
        // rows 0..4 vs rows 2..6: 16 / 48.
        ("one third", vec![(half.clone(), seg(|y, _| if (2..6).contains(&y) { 0 } else { BG }))], (1.0 / 3.0, 0.5)),
        ("disjoint", vec![(half.clone(), seg(|y, _| if y >= 4 { 0 } else { BG }))], (0.0, 0.0)),
        ("all background", vec![(quads.clone(), seg(|_, _| BG))], (0.0, 0.0)),
        // pred covers all 64 px as class 0; gt has 32: IoU 1/2, acc 1.
        ("over prediction", vec![(half.clone(), seg(|_, _| 0))], (0.5, 1.0)),
        // class 1 predicted on 16 background px, absent from gt: IoU 0 counts, acc does not.
        (
            "false positive category",
            vec![(half.clone(), seg(|y, x| if y < 4 { 0 } else if x < 2 { 1 } else { BG }))],
            (0.5, 1.0),
        ),
        // quadrants 0 and 1 swapped: both IoU 0, class 2 perfect.
        (
            "swapped labels",
            vec![(quads.clone(), seg(|y, x| match (y < 4, x < 4) {
                (true, true) => 1,
                (true, false) => 0,
                (false, true) => 2,
                _ => BG,
            }))],
            (1.0 / 3.0, 1.0 / 3.0),
        ),
        // one column of class 0 (8 px) predicted as class 2.
        (
            "single column error",
            vec![(quads.clone(), seg(|y, x| if y < 4 && x == 0 { 2 } else { quads.labels[[y, x]] }))],
            ((12.0 / 16.0 + 1.0 + 16.0 / 20.0) / 3.0, (12.0 / 16.0 + 1.0 + 1.0) / 3.0),
        ),
        // tallies pool across images: 32/32 then 0/32 for class 0 gives 32/64.
        (
            "pooled over images",
            vec![(half.clone(), half.clone()), (half.clone(), seg(|_, _| BG))],
            (0.5, 0.5),
        ),
        // a checkerboard of class 1 on a full class-1 gt: 32/64.
        ("checkerboard", vec![(seg(|_, _| 1), seg(|y, x| if (y + x) % 2 == 0 { 1 } else { BG }))], (0.5, 0.5)),
    ]
}
