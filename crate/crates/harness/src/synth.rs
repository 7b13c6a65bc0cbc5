//! Seeded synthetic models, calibration batches and decode inputs.
//!
//! Every generator draws from its own ChaCha stream so that, for one seed,
//! the model, the calibration batch and the decode tokens are independent.

use elitekv_core::{AttentionWeights, LayerWeights, Matrix, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::format::CalibData;

const STREAM_MODEL: u64 = 0;
const STREAM_CALIB: u64 = 1;
const STREAM_TOKENS: u64 = 2;
pub(crate) const STREAM_VERIFY: u64 = 3;

pub fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Weights with i.i.d. `N(0, 1/d)` entries, drawn layer by layer in the order
/// `wq, wk, wv, wo`, each row-major.
pub fn gen_model(seed: u64, cfg: &ModelConfig) -> AttentionWeights {
    let mut r = rng(seed, STREAM_MODEL);
    let std = 1.0 / (cfg.embed_dim as f64).sqrt();
    let (d, kv) = (cfg.embed_dim, cfg.kv_dim());
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            wq: gaussian(&mut r, d, kv, std),
            wk: gaussian(&mut r, d, kv, std),
            wv: gaussian(&mut r, d, kv, std),
            wo: gaussian(&mut r, kv, d, std),
        })
        .collect();
    AttentionWeights { layers }
}

/// Shape of a synthetic calibration batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalibSpec {
    pub vocab: usize,
    pub n_seqs: usize,
    pub seq_len: usize,
}

impl Default for CalibSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            n_seqs: 4,
            seq_len: 16,
        }
    }
}

/// Standard-normal embedding table (unit-variance coordinates, so queries
/// and keys of a `1/d`-variance model have unit-scale entries) and uniform
/// token ids.
pub fn gen_calib(seed: u64, embed_dim: usize, spec: CalibSpec) -> CalibData {
    let mut r = rng(seed, STREAM_CALIB);
    let table = gaussian(&mut r, spec.vocab, embed_dim, 1.0);
    let ids = (0..spec.n_seqs)
        .map(|_| {
            (0..spec.seq_len)
                .map(|_| r.random_range(0..spec.vocab as u32))
                .collect()
        })
        .collect();
    CalibData { table, ids }
}

/// Decode inputs with standard-normal coordinates.
pub fn gen_tokens(seed: u64, embed_dim: usize, n: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed, STREAM_TOKENS);
    (0..n)
        .map(|_| gaussian_vec(&mut r, embed_dim, 1.0))
        .collect()
}
