//! Named invariant suites run against a model file.

use std::path::Path;
use std::str::FromStr;

use elitekv_core::chunk_select::{binomial, selection_distances, EXHAUSTIVE_LIMIT};
use elitekv_core::linalg::{dot, vecmat};
use elitekv_core::lowrank::{split_key_columns, tail_energy, KeySplit};
use elitekv_core::{
    cache_bytes, cost_jlrd, cost_slrd, decompose_jlrd, exhaustive_search, forward_compressed,
    forward_full, forward_ropelite, matmul, relative_score, ropelite_search, rotate,
    split_key_projection, svd, truncated_factors, uniform_select, AttentionWeights, ChunkSet,
    CompressedModel, DecodeOutput, EliteSelection, FactorMode, KVCacheStore, LayerWeights,
    LowRankFactors, Matrix, ModelConfig, RopeParams, ScoreMode,
};
use rand::Rng;

use crate::error::{HarnessError, Result};
use crate::format::{read_factors, CalibData};
use crate::report::Record;
use crate::synth::{gaussian, gaussian_vec, gen_calib, gen_tokens, rng, CalibSpec, STREAM_VERIFY};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    RopeIdentity,
    EckartYoung,
    GreedyOracle,
    DecodeEquivalence,
    Accounting,
    Full,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::RopeIdentity,
        Suite::EckartYoung,
        Suite::GreedyOracle,
        Suite::DecodeEquivalence,
        Suite::Accounting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::RopeIdentity => "rope-identity",
            Suite::EckartYoung => "eckart-young",
            Suite::GreedyOracle => "greedy-oracle",
            Suite::DecodeEquivalence => "decode-equivalence",
            Suite::Accounting => "accounting",
            Suite::Full => "full",
        }
    }
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .chain([Suite::Full])
            .find(|x| x.name() == s)
            .ok_or_else(|| HarnessError::Invalid(format!("unknown suite {s:?}")))
    }
}

/// What a suite may look at besides the model.
pub struct VerifyInputs<'a> {
    pub cfg: ModelConfig,
    pub weights: &'a AttentionWeights,
    pub calib: Option<&'a CalibData>,
    pub elite: Option<&'a EliteSelection>,
    pub factors: Option<&'a Path>,
    pub seed: u64,
}

pub fn run_suite(suite: Suite, inp: &VerifyInputs<'_>) -> Result<Vec<Record>> {
    match suite {
        Suite::RopeIdentity => rope_identity(inp),
        Suite::EckartYoung => eckart_young(inp),
        Suite::GreedyOracle => greedy_oracle(inp),
        Suite::DecodeEquivalence => decode_equivalence(inp),
        Suite::Accounting => accounting(inp),
        Suite::Full => {
            let mut out = Vec::new();
            for s in Suite::ALL {
                out.extend(run_suite(s, inp)?);
            }
            Ok(out)
        }
    }
}

/// Maximum element-wise difference between two runs' hidden outputs.
pub fn max_abs_delta(a: &[DecodeOutput], b: &[DecodeOutput]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.hidden.iter().zip(&y.hidden).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// `(‖M − ÂB̂‖_F, tail-σ oracle, ‖M‖_F)` for one layer's factors, where `M`
/// is `[W^k_rest ‖ W^v]` (joint) or the two matrices taken separately.
pub fn factor_residual(
    split: &KeySplit,
    wv: &Matrix,
    f: &LowRankFactors,
) -> elitekv_core::Result<(f64, f64, f64)> {
    match f.mode() {
        FactorMode::Jlrd => {
            let joint = Matrix::hconcat(&[&split.rest, wv])?;
            let approx = matmul(f.a_k(), &f.b_kv().expect("joint factors"))?;
            let sigma = svd(&joint)?.sigma;
            Ok((
                joint.sub(&approx)?.frobenius_norm(),
                tail_energy(&sigma, f.key_rank()).sqrt(),
                joint.frobenius_norm(),
            ))
        }
        FactorMode::Slrd => {
            let ek = split.rest.sub(&matmul(f.a_k(), f.b_k())?)?.frobenius_norm();
            let ev = wv.sub(&matmul(f.a_v(), f.b_v())?)?.frobenius_norm();
            let tk = if split.rest.cols() == 0 {
                0.0
            } else {
                tail_energy(&svd(&split.rest)?.sigma, f.key_rank())
            };
            let tv = tail_energy(&svd(wv)?.sigma, f.value_rank());
            let norm = (split.rest.frobenius_norm().powi(2) + wv.frobenius_norm().powi(2)).sqrt();
            Ok(((ek * ek + ev * ev).sqrt(), (tk + tv).sqrt(), norm))
        }
    }
}

fn rope_identity(inp: &VerifyInputs<'_>) -> Result<Vec<Record>> {
    const SUITE: &str = "rope-identity";
    let mut r = rng(inp.seed, STREAM_VERIFY);
    let base = inp.cfg.rope.base();
    let mut dims = vec![4, 8, 64, 128, inp.cfg.head_dim];
    dims.sort_unstable();
    dims.dedup();
    let (mut ident, mut norm) = (0.0f64, 0.0f64);
    for &dh in &dims {
        let p = RopeParams::new(dh, base)?;
        for _ in 0..500 {
            let q = gaussian_vec(&mut r, dh, 1.0);
            let k = gaussian_vec(&mut r, dh, 1.0);
            let set = random_set(&mut r, dh / 2);
            let (m, n) = (r.random_range(0..4096i64), r.random_range(0..4096i64));
            let (qr, kr) = (rotate(&q, m, &set, &p)?, rotate(&k, n, &set, &p)?);
            let scale = dot(&q, &q).sqrt() * dot(&k, &k).sqrt();
            let rel = relative_score(&q, &k, m, n, &set, &p)?;
            ident = ident.max((dot(&qr, &kr) - rel).abs() / scale);
            norm = norm.max((dot(&qr, &qr).sqrt() - dot(&q, &q).sqrt()).abs());
        }
    }
    Ok(vec![
        Record::verify(SUITE, "absolute-equals-relative", ident, 1e-9),
        Record::verify(SUITE, "norm-preserved", norm, 1e-12),
    ])
}

fn random_set(r: &mut impl Rng, n: usize) -> ChunkSet {
    let idx = (0..n).filter(|_| r.random_bool(0.5)).collect();
    ChunkSet::new(idx, n).expect("indices in range")
}

fn eckart_young(inp: &VerifyInputs<'_>) -> Result<Vec<Record>> {
    const SUITE: &str = "eckart-young";
    let mut r = rng(inp.seed, STREAM_VERIFY + 1);
    let (mut tail, mut optimal, mut orth) = (0.0f64, 0.0f64, 0.0f64);
    for lw in &inp.weights.layers {
        for m in [&lw.wk, &lw.wv] {
            let s = svd(m)?;
            let full = m.frobenius_norm();
            orth = orth.max(
                matmul(&s.u.transpose(), &s.u)?
                    .sub(&Matrix::identity(s.u.cols()))?
                    .max_abs(),
            );
            let min = m.rows().min(m.cols());
            let step = (min / 16).max(1);
            for rank in (1..=min).step_by(step) {
                let (a, b) = truncated_factors(m, rank)?;
                let err = m.sub(&matmul(&a, &b)?)?.frobenius_norm();
                tail = tail.max((err - tail_energy(&s.sigma, rank).sqrt()).abs() / full);
                for _ in 0..10 {
                    let pa = a.add(&gaussian(&mut r, a.rows(), a.cols(), 1e-3))?;
                    let pb = b.add(&gaussian(&mut r, b.rows(), b.cols(), 1e-3))?;
                    let other = m.sub(&matmul(&pa, &pb)?)?.frobenius_norm();
                    optimal = optimal.max((err - other) / full);
                }
            }
        }
    }
    Ok(vec![
        Record::verify(SUITE, "error-equals-tail-sigma", tail, 1e-8),
        Record::verify(SUITE, "beats-perturbed-competitors", optimal, 1e-12),
        Record::verify(SUITE, "left-vectors-orthonormal", orth, 1e-9),
    ])
}

fn calib_or_default(inp: &VerifyInputs<'_>) -> CalibData {
    inp.calib.cloned().unwrap_or_else(|| {
        gen_calib(
            inp.seed,
            inp.cfg.embed_dim,
            CalibSpec {
                vocab: 32,
                n_seqs: 2,
                seq_len: 8,
            },
        )
    })
}

fn greedy_oracle(inp: &VerifyInputs<'_>) -> Result<Vec<Record>> {
    const SUITE: &str = "greedy-oracle";
    let cfg = &inp.cfg;
    let batch = calib_or_default(inp).batch()?;
    let n = cfg.n_chunks();
    let mode = ScoreMode::PreSoftmax;
    let mut out = Vec::new();
    let (mut r1, mut dominance, mut passes) = (0.0f64, 0.0f64, 0u64);
    let mut checked = 0;
    for r in 1..=n.min(3) {
        if binomial(n, r) > EXHAUSTIVE_LIMIT {
            break;
        }
        let (greedy, stats) = ropelite_search(cfg, inp.weights, &batch, r, mode)?;
        let exact = exhaustive_search(cfg, inp.weights, &batch, r, mode)?;
        let dg = selection_distances(cfg, inp.weights, &batch, &greedy, mode)?;
        let de = selection_distances(cfg, inp.weights, &batch, &exact, mode)?;
        for (g, e) in dg.iter().flatten().zip(de.iter().flatten()) {
            let scale = g.abs().max(e.abs()).max(1e-300);
            dominance = dominance.max((e - g) / scale);
            if r == 1 {
                r1 = r1.max((g - e).abs() / scale);
            }
        }
        passes += stats
            .forward_passes
            .abs_diff(elitekv_core::chunk_select::expected_forward_passes(n, r));
        checked += 1;
    }
    if checked == 0 {
        out.push(Record::failed(
            SUITE,
            "search-space",
            "no r small enough to enumerate",
        ));
        return Ok(out);
    }
    out.push(Record::verify(
        SUITE,
        "exhaustive-le-greedy",
        dominance,
        1e-12,
    ));
    out.push(Record::verify(
        SUITE,
        "greedy-equals-exhaustive-at-r1",
        r1,
        1e-12,
    ));
    out.push(Record::verify(
        SUITE,
        "forward-pass-count",
        passes as f64,
        0.0,
    ));
    Ok(out)
}

/// Cache-free recomputation of the full-RoPE forward pass.
pub fn recompute_full(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    tokens: &[Vec<f64>],
) -> elitekv_core::Result<Vec<Vec<f64>>> {
    let (nh, dh) = (cfg.n_heads, cfg.head_dim);
    let all = ChunkSet::full(cfg.n_chunks());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut xs: Vec<Vec<f64>> = tokens.to_vec();
    for lw in &w.layers {
        let LayerWeights { wq, wk, wv, wo } = lw;
        let inputs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| if cfg.residual_norm { rms(x) } else { x.clone() })
            .collect();
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for (t, x) in inputs.iter().enumerate() {
            let (qt, kt) = (vecmat(x, wq)?, vecmat(x, wk)?);
            let mut qr = Vec::with_capacity(qt.len());
            let mut kr = Vec::with_capacity(kt.len());
            for h in 0..nh {
                qr.extend(rotate(
                    &qt[h * dh..(h + 1) * dh],
                    t as i64,
                    &all,
                    &cfg.rope,
                )?);
                kr.extend(rotate(
                    &kt[h * dh..(h + 1) * dh],
                    t as i64,
                    &all,
                    &cfg.rope,
                )?);
            }
            q.push(qr);
            k.push(kr);
            v.push(vecmat(x, wv)?);
        }
        let mut next = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let mut mixed = vec![0.0; nh * dh];
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let mut row: Vec<f64> = (0..=t)
                    .map(|n| dot(&q[t][hs.clone()], &k[n][hs.clone()]) * scale)
                    .collect();
                elitekv_core::attention::softmax(&mut row);
                for (n, p) in row.iter().enumerate() {
                    for (m, val) in mixed[hs.clone()].iter_mut().zip(&v[n][hs.clone()]) {
                        *m += p * val;
                    }
                }
            }
            let attn = vecmat(&mixed, wo)?;
            next.push(if cfg.residual_norm {
                xs[t].iter().zip(&attn).map(|(a, b)| a + b).collect()
            } else {
                attn
            });
        }
        xs = next;
    }
    Ok(xs)
}

fn rms(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn jlrd_full_rank(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    sel: &EliteSelection,
) -> elitekv_core::Result<CompressedModel> {
    let d_ckv = cfg
        .embed_dim
        .min(2 * cfg.kv_dim() - 2 * sel.r * cfg.n_heads);
    let factors = (0..cfg.n_layers)
        .map(|l| {
            decompose_jlrd(
                &split_key_projection(&w.layers[l].wk, sel, l)?,
                &w.layers[l].wv,
                d_ckv,
            )
        })
        .collect::<elitekv_core::Result<Vec<_>>>()?;
    CompressedModel::build(cfg, w, factors)
}

fn decode_equivalence(inp: &VerifyInputs<'_>) -> Result<Vec<Record>> {
    const SUITE: &str = "decode-equivalence";
    let cfg = &inp.cfg;
    let w = inp.weights;
    let tokens = gen_tokens(inp.seed, cfg.embed_dim, 16);
    let full = forward_full(cfg, w, &tokens)?;
    let oracle = recompute_full(cfg, w, &tokens)?;
    let cached = full
        .iter()
        .zip(&oracle)
        .flat_map(|(o, h)| o.hidden.iter().zip(h).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);

    let all = vec![vec![ChunkSet::full(cfg.n_chunks()); cfg.n_heads]; cfg.n_layers];
    let degenerate = max_abs_delta(&forward_ropelite(cfg, w, &all, &tokens)?, &full);

    let half = match inp.elite {
        Some(sel) => sel.clone(),
        None => uniform_select(cfg, (cfg.n_chunks() / 2).max(1))?,
    };
    let rope = forward_ropelite(cfg, w, &half.layers, &tokens)?;
    let lossless = max_abs_delta(
        &forward_compressed(&jlrd_full_rank(cfg, w, &half)?, &tokens)?,
        &rope,
    );

    let mut out = vec![
        Record::verify(SUITE, "cached-equals-recomputed", cached, 1e-10),
        Record::verify(SUITE, "all-chunks-equals-full", degenerate, 1e-10),
        Record::verify(
            SUITE,
            "full-rank-compressed-equals-ropelite",
            lossless,
            1e-8,
        ),
    ];

    if let Some(path) = inp.factors {
        match read_factors(path) {
            Ok(ff) if ff.header.matches(cfg) => {
                // the compressed path must equal partial RoPE over the
                // reassembled projections, whatever the rank
                let mut rebuilt = w.clone();
                let mut elite = Vec::with_capacity(cfg.n_layers);
                for (lw, f) in rebuilt.layers.iter_mut().zip(&ff.layers) {
                    let wk_elite = lw.wk.select_columns(&f.layout.elite_cols)?;
                    let (wk, wv) = f.reassemble(&wk_elite)?;
                    lw.wk = wk;
                    lw.wv = wv;
                    elite.push(f.layout.elite.clone());
                }
                let model = CompressedModel::build(cfg, w, ff.layers.clone())?;
                let a = forward_compressed(&model, &tokens)?;
                let b = forward_ropelite(cfg, &rebuilt, &elite, &tokens)?;
                out.push(Record::verify(
                    SUITE,
                    "compressed-equals-reassembled",
                    max_abs_delta(&a, &b),
                    1e-8,
                ));
            }
            Ok(_) => out.push(Record::failed(
                SUITE,
                "compressed-equals-reassembled",
                "factor file shape differs from model",
            )),
            Err(e) => out.push(Record::failed(
                SUITE,
                "compressed-equals-reassembled",
                e.to_string(),
            )),
        }
    }
    Ok(out)
}

fn accounting(inp: &VerifyInputs<'_>) -> Result<Vec<Record>> {
    const SUITE: &str = "accounting";
    let cfg = &inp.cfg;
    let (d, kv, nh) = (
        cfg.embed_dim as u64,
        cfg.kv_dim() as u64,
        cfg.n_heads as u64,
    );
    let mut mismatches = 0u64;
    for r in 0..=cfg.n_chunks() {
        let rn = 2 * r as u64 * nh;
        for rank in [0, 1, d as usize / 2, d as usize] {
            let j = cost_jlrd(cfg, r, rank);
            let s = cost_slrd(cfg, r, rank.min((kv - rn) as usize), rank);
            let ck = rank.min((kv - rn) as usize) as u64;
            let unsimplified_j = rn * d + rank as u64 * (d + 2 * kv - rn);
            let unsimplified_s = rn * d + ck * (d + kv - rn) + rank as u64 * (d + kv);
            mismatches += u64::from(j.params_after != unsimplified_j)
                + u64::from(s.params_after != unsimplified_s)
                + u64::from(j.cache_per_token_layer != rn + rank as u64)
                + u64::from(j.params_original != 2 * d * kv);
        }
    }
    let mut out = vec![Record::verify(
        SUITE,
        "cost-formulas",
        mismatches as f64,
        0.0,
    )];

    let full = KVCacheStore::full(cfg);
    let width_ok = full.width() as u64 == 2 * kv
        && cache_bytes(&full, 10) == cfg.n_layers as u64 * 10 * 2 * kv * 8;
    out.push(Record::verify(
        SUITE,
        "full-cache-width",
        f64::from(u8::from(!width_ok)),
        0.0,
    ));

    let Some(path) = inp.factors else {
        return Ok(out);
    };
    let ff = match read_factors(path) {
        Ok(ff) => ff,
        Err(e) => {
            out.push(Record::failed(SUITE, "factor-file", e.to_string()));
            return Ok(out);
        }
    };
    if !ff.header.matches(cfg) {
        out.push(Record::failed(
            SUITE,
            "factor-file",
            "header shape differs from model",
        ));
        return Ok(out);
    }
    let f0 = &ff.layers[0];
    let expected = match ff.header.mode {
        FactorMode::Jlrd => cost_jlrd(cfg, ff.header.r, f0.key_rank()),
        FactorMode::Slrd => cost_slrd(cfg, ff.header.r, f0.key_rank(), f0.value_rank()),
    };
    match CompressedModel::build(cfg, inp.weights, ff.layers.clone()) {
        Ok(model) => {
            let store = KVCacheStore::compressed(&model);
            let off = (store.width() as i64 - expected.cache_per_token_layer as i64).unsigned_abs();
            out.push(Record::verify(
                SUITE,
                "compressed-width-matches-cost",
                off as f64,
                0.0,
            ));
            let ratio_ok = store.ratio() == expected.cache_ratio;
            out.push(Record::verify(
                SUITE,
                "cache-ratio-exact",
                f64::from(u8::from(!ratio_ok)),
                0.0,
            ));
        }
        Err(e) => out.push(Record::failed(
            SUITE,
            "compressed-width-matches-cost",
            e.to_string(),
        )),
    }
    let mut worst = 0.0f64;
    for (l, f) in ff.layers.iter().enumerate() {
        let split = split_key_columns(&inp.weights.layers[l].wk, &f.layout.elite, cfg.head_dim)?;
        let (res, oracle, norm) = factor_residual(&split, &inp.weights.layers[l].wv, f)?;
        worst = worst.max((res - oracle).abs() / norm.max(1e-300));
    }
    out.push(Record::verify(
        SUITE,
        "factor-error-equals-tail-sigma",
        worst,
        1e-8,
    ));
    Ok(out)
}
