//! Attention-only MHA decoder stack with three KV-cache layouts.
//!
//! * `Full`: every key chunk rotated at insertion, plus raw values.
//! * `Ropelite`: only each head's elite chunks rotated, same width as `Full`.
//! * `Compressed`: rotated elite key chunks plus low-rank latents; the
//!   up-projections are absorbed into the query and output paths so nothing
//!   cached is ever rotated again.

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, vecmat, Matrix};
use crate::lowrank::{FactorMode, LowRankFactors};
use crate::rope::{rotate_in_place, ChunkSet, RopeParams, DEFAULT_BASE};

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub rope: RopeParams,
    /// Adds `x + attn(rms_norm(x))` around each layer.
    pub residual_norm: bool,
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, embed_dim: usize) -> Result<Self> {
        Self::with_base(n_layers, n_heads, head_dim, embed_dim, DEFAULT_BASE)
    }

    pub fn with_base(
        n_layers: usize,
        n_heads: usize,
        head_dim: usize,
        embed_dim: usize,
        base: f64,
    ) -> Result<Self> {
        if n_layers == 0 || n_heads == 0 || embed_dim == 0 {
            return Err(Error::Config(
                "layer, head and embed counts must be >= 1".into(),
            ));
        }
        let rope = RopeParams::new(head_dim, base)?;
        if embed_dim != head_dim * n_heads {
            return Err(Error::Config(format!(
                "embed_dim {embed_dim} != head_dim {head_dim} x n_heads {n_heads}"
            )));
        }
        Ok(Self {
            n_layers,
            n_heads,
            head_dim,
            embed_dim,
            rope,
            residual_norm: false,
        })
    }

    pub fn with_residual_norm(mut self, on: bool) -> Self {
        self.residual_norm = on;
        self
    }

    /// `d_h · n_h`, the width of one projected q, k or v.
    pub fn kv_dim(&self) -> usize {
        self.head_dim * self.n_heads
    }

    pub fn n_chunks(&self) -> usize {
        self.head_dim / 2
    }

    /// Per-token per-layer cache width of the unmodified model.
    pub fn full_cache_width(&self) -> usize {
        2 * self.kv_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub layers: Vec<LayerWeights>,
}

impl AttentionWeights {
    pub fn new(cfg: &ModelConfig, layers: Vec<LayerWeights>) -> Result<Self> {
        let w = Self { layers };
        w.validate(cfg)?;
        Ok(w)
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, kv) = (cfg.embed_dim, cfg.kv_dim());
        let layer = LayerWeights {
            wq: Matrix::zeros(d, kv),
            wk: Matrix::zeros(d, kv),
            wv: Matrix::zeros(d, kv),
            wo: Matrix::zeros(kv, d),
        };
        Self {
            layers: vec![layer; cfg.n_layers],
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} weight layers for a {}-layer config",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let (d, kv) = (cfg.embed_dim, cfg.kv_dim());
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, m, want) in [
                ("wq", &lw.wq, (d, kv)),
                ("wk", &lw.wk, (d, kv)),
                ("wv", &lw.wv, (d, kv)),
                ("wo", &lw.wo, (kv, d)),
            ] {
                if m.shape() != want {
                    return Err(Error::Shape(format!(
                        "layer {l} {name} is {:?}, expected {want:?}",
                        m.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Output of one decode step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub hidden: Vec<f64>,
    /// Softmax rows, `[layer][head][position]`, when diagnostics are on.
    pub scores: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CacheLayout {
    Full,
    Ropelite,
    Compressed,
}

impl CacheLayout {
    pub fn name(self) -> &'static str {
        match self {
            CacheLayout::Full => "full",
            CacheLayout::Ropelite => "ropelite",
            CacheLayout::Compressed => "compressed",
        }
    }
}

/// Token-major per-layer cache. Entry widths:
///
/// * full / ropelite: `[keys (d_h·n_h) ‖ values (d_h·n_h)]`, keys in head order.
/// * compressed: `[rotated elite key chunks (2r·n_h) ‖ latent]` where the latent
///   is `d_ckv` wide (joint) or `d_ck + d_cv` wide (separate).
#[derive(Clone, Debug, PartialEq)]
pub struct KVCacheStore {
    layout: CacheLayout,
    width: usize,
    full_width: usize,
    elite: Option<Vec<Vec<ChunkSet>>>,
    layers: Vec<Vec<f64>>,
    tokens: usize,
}

impl KVCacheStore {
    pub fn full(cfg: &ModelConfig) -> Self {
        Self::empty(cfg, CacheLayout::Full, cfg.full_cache_width(), None)
    }

    pub fn ropelite(cfg: &ModelConfig, elite: &[Vec<ChunkSet>]) -> Result<Self> {
        check_elite(cfg, elite)?;
        Ok(Self::empty(
            cfg,
            CacheLayout::Ropelite,
            cfg.full_cache_width(),
            Some(elite.to_vec()),
        ))
    }

    pub fn compressed(model: &CompressedModel) -> Self {
        let cfg = &model.cfg;
        let elite = model
            .layers
            .iter()
            .map(|l| l.factors.layout.elite.clone())
            .collect();
        Self::empty(
            cfg,
            CacheLayout::Compressed,
            model.cache_width(),
            Some(elite),
        )
    }

    fn empty(
        cfg: &ModelConfig,
        layout: CacheLayout,
        width: usize,
        elite: Option<Vec<Vec<ChunkSet>>>,
    ) -> Self {
        Self {
            layout,
            width,
            full_width: cfg.full_cache_width(),
            elite,
            layers: vec![Vec::new(); cfg.n_layers],
            tokens: 0,
        }
    }

    pub fn layout(&self) -> CacheLayout {
        self.layout
    }

    /// Stored reals per token per layer.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn elite(&self) -> Option<&[Vec<ChunkSet>]> {
        self.elite.as_deref()
    }

    pub fn entry(&self, layer: usize, token: usize) -> &[f64] {
        &self.layers[layer][token * self.width..(token + 1) * self.width]
    }

    /// Reals actually held in memory across all layers.
    pub fn stored_len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Width relative to the unmodified full layout, exact.
    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.width as u64, self.full_width as u64)
    }
}

/// Bytes for `t` tokens at `elem_bytes` per stored real.
pub fn cache_bytes_with(cache: &KVCacheStore, t: u64, elem_bytes: u64) -> u64 {
    cache.n_layers() as u64 * t * cache.width() as u64 * elem_bytes
}

/// Bytes for `t` tokens of in-memory `f64` entries.
pub fn cache_bytes(cache: &KVCacheStore, t: u64) -> u64 {
    cache_bytes_with(cache, t, std::mem::size_of::<f64>() as u64)
}

fn check_elite(cfg: &ModelConfig, elite: &[Vec<ChunkSet>]) -> Result<()> {
    if elite.len() != cfg.n_layers || elite.iter().any(|l| l.len() != cfg.n_heads) {
        return Err(Error::Selection(format!(
            "elite sets must cover {} layers x {} heads",
            cfg.n_layers, cfg.n_heads
        )));
    }
    let n = cfg.n_chunks();
    if let Some(bad) = elite
        .iter()
        .flatten()
        .find(|s| s.indices().iter().any(|&i| i >= n))
    {
        return Err(Error::Selection(format!(
            "chunk set {bad} exceeds {n} chunks"
        )));
    }
    Ok(())
}

fn check_token(cfg: &ModelConfig, x: &[f64]) -> Result<()> {
    if x.len() != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "token embedding of length {}, expected {}",
            x.len(),
            cfg.embed_dim
        )));
    }
    Ok(())
}

pub(crate) fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

/// In-place numerically stable softmax.
pub fn softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn finish_layer(cfg: &ModelConfig, x: &[f64], attn: Vec<f64>) -> Vec<f64> {
    if cfg.residual_norm {
        x.iter().zip(attn).map(|(a, b)| a + b).collect()
    } else {
        attn
    }
}

fn layer_input(cfg: &ModelConfig, x: &[f64]) -> Vec<f64> {
    if cfg.residual_norm {
        rms_norm(x)
    } else {
        x.to_vec()
    }
}

/// One step for the `Full` and `Ropelite` layouts. The chunk sets to rotate
/// come from the cache (`Full` rotates every chunk).
pub fn decode_step(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    cache: &mut KVCacheStore,
    x_t: &[f64],
    diagnostics: bool,
) -> Result<DecodeOutput> {
    decode_step_traced(cfg, weights, cache, x_t, diagnostics, None)
}

fn decode_step_traced(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    cache: &mut KVCacheStore,
    x_t: &[f64],
    diagnostics: bool,
    mut trace: Option<&mut Vec<Vec<Vec<f64>>>>,
) -> Result<DecodeOutput> {
    check_token(cfg, x_t)?;
    if cache.layout == CacheLayout::Compressed {
        return Err(Error::Cache(
            "compressed cache needs decode_step_compressed".into(),
        ));
    }
    if cache.width != cfg.full_cache_width() || cache.layers.len() != cfg.n_layers {
        return Err(Error::Cache("cache does not match model config".into()));
    }
    let full = vec![ChunkSet::full(cfg.n_chunks()); cfg.n_heads];
    let freqs = cfg.rope.frequencies();
    let (dh, kv) = (cfg.head_dim, cfg.kv_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let pos = cache.tokens;

    let mut x = x_t.to_vec();
    let mut all_scores = Vec::new();
    for (l, lw) in weights.layers.iter().enumerate() {
        let input = layer_input(cfg, &x);
        if let Some(t) = trace.as_deref_mut() {
            t[l].push(input.clone());
        }
        let mut q = vecmat(&input, &lw.wq)?;
        let mut k = vecmat(&input, &lw.wk)?;
        let v = vecmat(&input, &lw.wv)?;
        let sets = match &cache.elite {
            Some(e) => &e[l],
            None => &full,
        };
        for h in 0..cfg.n_heads {
            let chunks = sets[h].indices();
            rotate_in_place(&mut q[h * dh..(h + 1) * dh], pos as i64, chunks, &freqs);
            rotate_in_place(&mut k[h * dh..(h + 1) * dh], pos as i64, chunks, &freqs);
        }
        let store = &mut cache.layers[l];
        store.extend_from_slice(&k);
        store.extend_from_slice(&v);

        let n_tok = pos + 1;
        let mut concat = vec![0.0; kv];
        let mut layer_scores = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let mut row: Vec<f64> = (0..n_tok)
                .map(|n| {
                    let e = &store[n * 2 * kv..(n + 1) * 2 * kv];
                    dot(qh, &e[h * dh..(h + 1) * dh]) * scale
                })
                .collect();
            softmax(&mut row);
            let out = &mut concat[h * dh..(h + 1) * dh];
            for (n, p) in row.iter().enumerate() {
                let e = &store[n * 2 * kv..(n + 1) * 2 * kv];
                for (o, vv) in out.iter_mut().zip(&e[kv + h * dh..kv + (h + 1) * dh]) {
                    *o += p * vv;
                }
            }
            layer_scores.push(row);
        }
        let attn = vecmat(&concat, &lw.wo)?;
        x = finish_layer(cfg, &x, attn);
        if diagnostics {
            all_scores.push(layer_scores);
        }
    }
    cache.tokens += 1;
    Ok(DecodeOutput {
        hidden: x,
        scores: diagnostics.then_some(all_scores),
    })
}

/// Reference path: full RoPE on every chunk.
pub fn forward_full(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    tokens: &[Vec<f64>],
) -> Result<Vec<DecodeOutput>> {
    weights.validate(cfg)?;
    let mut cache = KVCacheStore::full(cfg);
    tokens
        .iter()
        .map(|x| decode_step(cfg, weights, &mut cache, x, true))
        .collect()
}

/// Inputs seen by each attention layer (after normalization, if enabled)
/// during a full-RoPE pass, as `[layer][position]`.
pub fn layer_inputs(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    tokens: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    weights.validate(cfg)?;
    let mut cache = KVCacheStore::full(cfg);
    let mut trace = vec![Vec::with_capacity(tokens.len()); cfg.n_layers];
    for x in tokens {
        decode_step_traced(cfg, weights, &mut cache, x, false, Some(&mut trace))?;
    }
    Ok(trace)
}

/// Partial rotation: each head rotates only its elite chunks.
pub fn forward_ropelite(
    cfg: &ModelConfig,
    weights: &AttentionWeights,
    elite: &[Vec<ChunkSet>],
    tokens: &[Vec<f64>],
) -> Result<Vec<DecodeOutput>> {
    weights.validate(cfg)?;
    let mut cache = KVCacheStore::ropelite(cfg, elite)?;
    tokens
        .iter()
        .map(|x| decode_step(cfg, weights, &mut cache, x, true))
        .collect()
}

/// One layer of a factorized model with up-projections absorbed.
#[derive(Clone, Debug)]
pub struct CompressedLayer {
    pub wq_elite: Matrix,
    pub wq_rest: Matrix,
    pub wk_elite: Matrix,
    pub factors: LowRankFactors,
    /// Per head `B^v_h · W^o_h`, each `value_rank × d`.
    pub wo_absorbed: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct CompressedModel {
    pub cfg: ModelConfig,
    pub layers: Vec<CompressedLayer>,
}

impl CompressedModel {
    /// Splits `W^q`/`W^k` by each layer's elite layout and folds `B^v` into
    /// the output projection.
    pub fn build(
        cfg: &ModelConfig,
        weights: &AttentionWeights,
        factors: Vec<LowRankFactors>,
    ) -> Result<Self> {
        weights.validate(cfg)?;
        if factors.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} factor layers for a {}-layer model",
                factors.len(),
                cfg.n_layers
            )));
        }
        let dh = cfg.head_dim;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (lw, f) in weights.layers.iter().zip(factors) {
            f.validate(cfg)?;
            let layout = &f.layout;
            let wq_elite = lw.wq.select_columns(&layout.elite_cols)?;
            let wq_rest = lw.wq.select_columns(&layout.rest_cols)?;
            let wk_elite = lw.wk.select_columns(&layout.elite_cols)?;
            let bv = f.b_v();
            let wo_absorbed = (0..cfg.n_heads)
                .map(|h| {
                    let bv_h = bv.column_block(h * dh, (h + 1) * dh)?;
                    let wo_h = lw.wo.row_block(h * dh, (h + 1) * dh)?;
                    matmul(&bv_h, &wo_h)
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = layers.first() {
                let first: &CompressedLayer = first;
                let w0 = first.factors.layout.elite_cols.len() + first.factors.latent_width();
                let w = layout.elite_cols.len() + f.latent_width();
                if w != w0 {
                    return Err(Error::Shape(format!(
                        "cache width {w} differs from layer 0 width {w0}"
                    )));
                }
            }
            layers.push(CompressedLayer {
                wq_elite,
                wq_rest,
                wk_elite,
                factors: f,
                wo_absorbed,
            });
        }
        Ok(Self { cfg: *cfg, layers })
    }

    /// `2r·n_h + d_ckv` (joint) or `2r·n_h + d_ck + d_cv` (separate).
    pub fn cache_width(&self) -> usize {
        self.layers.first().map_or(0, |l| {
            l.factors.layout.elite_cols.len() + l.factors.latent_width()
        })
    }
}

/// One step over a compressed cache.
pub fn decode_step_compressed(
    model: &CompressedModel,
    cache: &mut KVCacheStore,
    x_t: &[f64],
    diagnostics: bool,
) -> Result<DecodeOutput> {
    let cfg = &model.cfg;
    check_token(cfg, x_t)?;
    if cache.layout != CacheLayout::Compressed {
        return Err(Error::Cache(format!(
            "expected a compressed cache, got {}",
            cache.layout.name()
        )));
    }
    if cache.width != model.cache_width() || cache.layers.len() != cfg.n_layers {
        return Err(Error::Cache("cache does not match compressed model".into()));
    }
    let freqs = cfg.rope.frequencies();
    let dh = cfg.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let pos = cache.tokens;
    let width = cache.width;

    let mut x = x_t.to_vec();
    let mut all_scores = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let f = &layer.factors;
        let layout = &f.layout;
        let r2 = 2 * layout.r;
        let rest_w = dh - r2;
        let input = layer_input(cfg, &x);

        let mut q_e = vecmat(&input, &layer.wq_elite)?;
        let mut k_e = vecmat(&input, &layer.wk_elite)?;
        for h in 0..cfg.n_heads {
            // elite columns are packed per head as local chunks 0..r
            let local: Vec<usize> = (0..layout.r).collect();
            let head_freqs: Vec<f64> = layout.elite[h]
                .indices()
                .iter()
                .map(|&i| freqs[i])
                .collect();
            rotate_in_place(
                &mut q_e[h * r2..(h + 1) * r2],
                pos as i64,
                &local,
                &head_freqs,
            );
            rotate_in_place(
                &mut k_e[h * r2..(h + 1) * r2],
                pos as i64,
                &local,
                &head_freqs,
            );
        }
        let q_rest = vecmat(&input, &layer.wq_rest)?;

        let latent_k = vecmat(&input, f.a_k())?;
        let store = &mut cache.layers[l];
        store.extend_from_slice(&k_e);
        match f.mode() {
            FactorMode::Jlrd => store.extend_from_slice(&latent_k),
            FactorMode::Slrd => {
                store.extend_from_slice(&latent_k);
                store.extend_from_slice(&vecmat(&input, f.a_v())?);
            }
        }

        let (k_rank, v_rank) = (f.key_rank(), f.value_rank());
        let k_off = r2 * cfg.n_heads;
        let v_off = match f.mode() {
            FactorMode::Jlrd => k_off,
            FactorMode::Slrd => k_off + k_rank,
        };
        let bk = f.b_k();
        let n_tok = pos + 1;
        let mut out = vec![0.0; cfg.embed_dim];
        let mut layer_scores = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            // absorbed query: q_rest_h · B^k_hᵀ
            let qh_rest = &q_rest[h * rest_w..(h + 1) * rest_w];
            let q_abs: Vec<f64> = (0..k_rank)
                .map(|c| dot(qh_rest, &bk.row(c)[h * rest_w..(h + 1) * rest_w]))
                .collect();
            let qh_e = &q_e[h * r2..(h + 1) * r2];
            let mut row: Vec<f64> = (0..n_tok)
                .map(|n| {
                    let e = &store[n * width..(n + 1) * width];
                    let elite = dot(qh_e, &e[h * r2..(h + 1) * r2]);
                    let rest = dot(&q_abs, &e[k_off..k_off + k_rank]);
                    (elite + rest) * scale
                })
                .collect();
            softmax(&mut row);
            let mut mixed = vec![0.0; v_rank];
            for (n, p) in row.iter().enumerate() {
                let e = &store[n * width..(n + 1) * width];
                for (m, c) in mixed.iter_mut().zip(&e[v_off..v_off + v_rank]) {
                    *m += p * c;
                }
            }
            let contrib = vecmat(&mixed, &layer.wo_absorbed[h])?;
            for (o, c) in out.iter_mut().zip(contrib) {
                *o += c;
            }
            layer_scores.push(row);
        }
        x = finish_layer(cfg, &x, out);
        if diagnostics {
            all_scores.push(layer_scores);
        }
    }
    cache.tokens += 1;
    Ok(DecodeOutput {
        hidden: x,
        scores: diagnostics.then_some(all_scores),
    })
}

pub fn forward_compressed(
    model: &CompressedModel,
    tokens: &[Vec<f64>],
) -> Result<Vec<DecodeOutput>> {
    let mut cache = KVCacheStore::compressed(model);
    tokens
        .iter()
        .map(|x| decode_step_compressed(model, &mut cache, x, true))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::new(2, 2, 4, 8).unwrap()
    }

    #[test]
    fn config_rejects_non_mha_shapes() {
        assert!(ModelConfig::new(1, 2, 4, 9).is_err());
        assert!(ModelConfig::new(0, 2, 4, 8).is_err());
        assert!(ModelConfig::new(1, 2, 3, 6).is_err());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let cfg = cfg();
        let w = AttentionWeights::zeros(&cfg);
        let toks = vec![vec![1.0; 8], vec![-2.0; 8], vec![0.5; 8]];
        for out in forward_full(&cfg, &w, &toks).unwrap() {
            assert!(out.hidden.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let cfg = cfg();
        let w = AttentionWeights::zeros(&cfg);
        let mut cache = KVCacheStore::full(&cfg);
        assert!(decode_step(&cfg, &w, &mut cache, &[0.0; 7], false).is_err());
        let elite = vec![vec![ChunkSet::full(2); 3]; 2];
        assert!(KVCacheStore::ropelite(&cfg, &elite).is_err());
    }

    #[test]
    fn cache_width_and_bytes() {
        let cfg = ModelConfig::new(32, 32, 128, 4096).unwrap();
        let cache = KVCacheStore::full(&cfg);
        assert_eq!(cache.width(), 8192);
        assert_eq!(cache_bytes_with(&cache, 1, 2), 32 * 8192 * 2);
        assert_eq!(cache_bytes(&cache, 3), 32 * 3 * 8192 * 8);
        assert_eq!(cache.ratio(), Ratio::new(1, 1));
    }
}
