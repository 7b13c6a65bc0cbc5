#![allow(dead_code)]

use elitekv_core::{AttentionWeights, CalibrationBatch, LayerWeights, Matrix, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        rng.sample::<f64, _>(StandardNormal) * std
    })
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect()
}

pub fn random_weights(cfg: &ModelConfig, seed: u64) -> AttentionWeights {
    let mut r = rng(seed);
    let (d, kv) = (cfg.embed_dim, cfg.kv_dim());
    let std = 1.0 / (d as f64).sqrt();
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            wq: gaussian(&mut r, d, kv, std),
            wk: gaussian(&mut r, d, kv, std),
            wv: gaussian(&mut r, d, kv, std),
            wo: gaussian(&mut r, kv, d, std),
        })
        .collect();
    AttentionWeights::new(cfg, layers).unwrap()
}

pub fn random_tokens(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| gaussian_vec(&mut r, d, 1.0)).collect()
}

pub fn random_calib(d: usize, n_seqs: usize, len: usize, seed: u64) -> CalibrationBatch {
    let seqs = (0..n_seqs)
        .map(|i| random_tokens(d, len, seed * 1000 + i as u64))
        .collect();
    CalibrationBatch::new(seqs, d).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
