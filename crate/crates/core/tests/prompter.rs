mod common;

use candle_core::{Device, Tensor};
use common::rng;
use partseg::prompter::{position_encoding, prompter_forward, Prompter, PrompterParams};
use partseg::types::FeatureMap;
use partseg::Config;
use rand::seq::SliceRandom;
use rand::Rng;

fn tiny() -> Config {
    Config {
        image_size: 64,
        encoder_stride: 4,
        embed_dim: 16,
        num_heads: 4,
        num_queries: 5,
        num_categories: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        ..Config::desk()
    }
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn spatial_order_does_not_matter_when_positions_travel_along() {
    let cfg = tiny();
    let params = PrompterParams::init(&cfg, 3).unwrap();
    let p = Prompter::new(&params, &cfg);
    let mut r = rng(41);
    let (n, d) = (16, 16);
    let tokens: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let pos = position_encoding(4, 4, d);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let permute = |v: &[f64]| -> Vec<f64> { order.iter().flat_map(|&i| v[i * d..(i + 1) * d].to_vec()).collect() };
    let pos_flat = pos.iter().cloned().collect::<Vec<_>>();

    let (l0, p0) = p
        .decode_tokens(&tensor(tokens.clone(), &[1, n, d]), &tensor(pos_flat.clone(), &[n, d]), None)
        .unwrap();
    let (l1, p1) = p
        .decode_tokens(&tensor(permute(&tokens), &[1, n, d]), &tensor(permute(&pos_flat), &[n, d]), None)
        .unwrap();
    assert!(max_diff(&l0, &l1) < 1e-5);
    assert!(max_diff(&p0, &p1) < 1e-5);
}

#[test]
fn permuting_queries_permutes_outputs() {
    let cfg = tiny();
    let params = PrompterParams::init(&cfg, 4).unwrap();
    let mut r = rng(42);
    let feats = FeatureMap {
        features: ndarray::Array3::from_shape_fn((16, 16, 16), |_| r.random_range(-1.0..1.0)),
        stride: 4,
    };
    let before = prompter_forward(&feats, &params, &cfg).unwrap();
    let q = params.get("queries").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let d = cfg.embed_dim;
    let order = [3usize, 0, 4, 1, 2];
    let moved: Vec<f64> = order.iter().flat_map(|&i| q[i * d..(i + 1) * d].to_vec()).collect();
    params.set("queries", &moved).unwrap();
    let after = prompter_forward(&feats, &params, &cfg).unwrap();
    for (k, &i) in order.iter().enumerate() {
        for (a, b) in after.class_logits.row(k).iter().zip(before.class_logits.row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in after.prompt_tokens.row(k).iter().zip(before.prompt_tokens.row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn output_shapes_follow_config() {
    let cfg = Config::desk();
    let params = PrompterParams::init(&cfg, 0).unwrap();
    let feats = FeatureMap {
        features: ndarray::Array3::zeros((8, 8, 32)),
        stride: 16,
    };
    let out = prompter_forward(&feats, &params, &cfg).unwrap();
    assert_eq!(out.class_logits.dim(), (8, 4));
    assert_eq!(out.prompt_tokens.dim(), (8, 32));
    let k2 = Config { tokens_per_part: 2, ..Config::desk() };
    let out = prompter_forward(&feats, &PrompterParams::init(&k2, 0).unwrap(), &k2).unwrap();
    assert_eq!(out.prompt_tokens.dim(), (8, 64));
}
