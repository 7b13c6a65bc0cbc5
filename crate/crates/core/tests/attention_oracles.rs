mod common;

use common::{max_abs_diff, random_tokens, random_weights};
use elitekv_core::attention::{
    cache_bytes, decode_step, decode_step_compressed, forward_compressed, forward_full,
    forward_ropelite, AttentionWeights, CacheLayout, CompressedModel, KVCacheStore, LayerWeights,
    ModelConfig,
};
use elitekv_core::linalg::vecmat;
use elitekv_core::lowrank::{decompose_jlrd, decompose_slrd, split_key_columns};
use elitekv_core::rope::{relative_score, rotate, ChunkSet};
use num_rational::Ratio;

fn rms(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v / (ms + 1e-6).sqrt()).collect()
}

enum Scoring<'a> {
    /// Rotate every chunk in absolute form.
    Absolute,
    /// Mixed relative-form score per `(layer, head)` chunk set.
    Relative(&'a [Vec<ChunkSet>]),
}

/// Whole-sequence recomputation without any cache: every layer recomputes
/// q, k, v for all positions and attends causally.
fn recompute(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    tokens: &[Vec<f64>],
    scoring: &Scoring,
) -> Vec<Vec<f64>> {
    let (dh, t) = (cfg.head_dim, tokens.len());
    let full = ChunkSet::full(cfg.n_chunks());
    let mut xs = tokens.to_vec();
    for (l, lw) in w.layers.iter().enumerate() {
        let inputs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| if cfg.residual_norm { rms(x) } else { x.clone() })
            .collect();
        let q: Vec<Vec<f64>> = inputs.iter().map(|x| vecmat(x, &lw.wq).unwrap()).collect();
        let k: Vec<Vec<f64>> = inputs.iter().map(|x| vecmat(x, &lw.wk).unwrap()).collect();
        let v: Vec<Vec<f64>> = inputs.iter().map(|x| vecmat(x, &lw.wv).unwrap()).collect();
        let mut next = Vec::with_capacity(t);
        for m in 0..t {
            let mut concat = vec![0.0; cfg.kv_dim()];
            for h in 0..cfg.n_heads {
                let hs = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = (0..=m)
                    .map(|n| {
                        let s = match scoring {
                            Scoring::Absolute => {
                                let qr =
                                    rotate(&q[m][hs.clone()], m as i64, &full, &cfg.rope).unwrap();
                                let kr =
                                    rotate(&k[n][hs.clone()], n as i64, &full, &cfg.rope).unwrap();
                                qr.iter().zip(&kr).map(|(a, b)| a * b).sum::<f64>()
                            }
                            Scoring::Relative(sets) => relative_score(
                                &q[m][hs.clone()],
                                &k[n][hs.clone()],
                                m as i64,
                                n as i64,
                                &sets[l][h],
                                &cfg.rope,
                            )
                            .unwrap(),
                        };
                        s / (dh as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (n, e) in exps.iter().enumerate() {
                    for j in 0..dh {
                        concat[h * dh + j] += e / z * v[n][h * dh + j];
                    }
                }
            }
            let attn = vecmat(&concat, &lw.wo).unwrap();
            next.push(if cfg.residual_norm {
                xs[m].iter().zip(&attn).map(|(a, b)| a + b).collect()
            } else {
                attn
            });
        }
        xs = next;
    }
    xs
}

fn small_cfg() -> ModelConfig {
    ModelConfig::new(2, 2, 4, 8).unwrap()
}

fn random_sets(cfg: &ModelConfig, r: usize, seed: u64) -> Vec<Vec<ChunkSet>> {
    let n = cfg.n_chunks();
    let mut s = seed;
    (0..cfg.n_layers)
        .map(|_| {
            (0..cfg.n_heads)
                .map(|_| {
                    let mut idx: Vec<usize> = (0..n).collect();
                    for i in (1..n).rev() {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                        idx.swap(i, (s >> 33) as usize % (i + 1));
                    }
                    ChunkSet::new(idx[..r].to_vec(), n).unwrap()
                })
                .collect()
        })
        .collect()
}

#[test]
fn single_token_outputs_projected_value() {
    let cfg = ModelConfig::new(1, 2, 4, 8).unwrap();
    let w = random_weights(&cfg, 1);
    let x = random_tokens(8, 1, 2).remove(0);
    let out = forward_full(&cfg, &w, &[x.clone()]).unwrap();
    let v = vecmat(&x, &w.layers[0].wv).unwrap();
    let expected = vecmat(&v, &w.layers[0].wo).unwrap();
    assert!(max_abs_diff(&out[0].hidden, &expected) < 1e-14);
}

#[test]
fn incremental_full_matches_recomputation() {
    for residual in [false, true] {
        let cfg = small_cfg().with_residual_norm(residual);
        let w = random_weights(&cfg, 3);
        let toks = random_tokens(8, 5, 4);
        let inc = forward_full(&cfg, &w, &toks).unwrap();
        let oracle = recompute(&cfg, &w, &toks, &Scoring::Absolute);
        for (a, b) in inc.iter().zip(&oracle) {
            assert!(max_abs_diff(&a.hidden, b) <= 1e-9);
        }
    }
}

#[test]
fn softmax_rows_are_normalized_and_causal() {
    let cfg = small_cfg();
    let w = random_weights(&cfg, 5);
    let toks = random_tokens(8, 6, 6);
    for (t, out) in forward_full(&cfg, &w, &toks).unwrap().iter().enumerate() {
        for layer in out.scores.as_ref().unwrap() {
            for row in layer {
                assert_eq!(row.len(), t + 1);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn ropelite_matches_relative_score_oracle() {
    let cfg = ModelConfig::new(2, 2, 8, 16).unwrap();
    let w = random_weights(&cfg, 7);
    let toks = random_tokens(16, 7, 8);
    for r in 0..=4 {
        let sets = random_sets(&cfg, r, 100 + r as u64);
        let inc = forward_ropelite(&cfg, &w, &sets, &toks).unwrap();
        let oracle = recompute(&cfg, &w, &toks, &Scoring::Relative(&sets));
        for (a, b) in inc.iter().zip(&oracle) {
            assert!(max_abs_diff(&a.hidden, b) <= 1e-9, "r={r}");
        }
    }
}

#[test]
fn ropelite_with_all_chunks_is_full_rope() {
    let cfg = ModelConfig::new(2, 2, 8, 16).unwrap();
    let w = random_weights(&cfg, 9);
    let toks = random_tokens(16, 12, 10);
    let full_sets = vec![vec![ChunkSet::full(4); 2]; 2];
    let a = forward_full(&cfg, &w, &toks).unwrap();
    let b = forward_ropelite(&cfg, &w, &full_sets, &toks).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(max_abs_diff(&x.hidden, &y.hidden) <= 1e-10);
    }
}

#[test]
fn ropelite_with_no_chunks_is_plain_dot_product() {
    let cfg = ModelConfig::new(1, 1, 4, 4).unwrap();
    let w = random_weights(&cfg, 11);
    let toks = random_tokens(4, 3, 12);
    let out = forward_ropelite(&cfg, &w, &[vec![ChunkSet::empty()]], &toks).unwrap();
    let lw = &w.layers[0];
    let q: Vec<Vec<f64>> = toks.iter().map(|x| vecmat(x, &lw.wq).unwrap()).collect();
    let k: Vec<Vec<f64>> = toks.iter().map(|x| vecmat(x, &lw.wk).unwrap()).collect();
    let row = &out[2].scores.as_ref().unwrap()[0][0];
    let logits: Vec<f64> = (0..3)
        .map(|n| q[2].iter().zip(&k[n]).map(|(a, b)| a * b).sum::<f64>() / 2.0)
        .collect();
    let z: f64 = logits.iter().map(|s| s.exp()).sum();
    for n in 0..3 {
        assert!((row[n] - logits[n].exp() / z).abs() < 1e-12);
    }
}

fn jlrd_model(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    sets: &[Vec<ChunkSet>],
    d_ckv: usize,
) -> CompressedModel {
    let factors = w
        .layers
        .iter()
        .zip(sets)
        .map(|(lw, s)| {
            let split = split_key_columns(&lw.wk, s, cfg.head_dim).unwrap();
            decompose_jlrd(&split, &lw.wv, d_ckv).unwrap()
        })
        .collect();
    CompressedModel::build(cfg, w, factors).unwrap()
}

#[test]
fn compressed_full_rank_matches_ropelite() {
    let cfg = ModelConfig::new(2, 2, 8, 16).unwrap();
    let w = random_weights(&cfg, 13);
    let toks = random_tokens(16, 20, 14);
    for r in [0, 1, 2, 4] {
        let sets = random_sets(&cfg, r, 200 + r as u64);
        // rank of [W^k_rest ‖ W^v] is at most d
        let d_ckv = cfg.embed_dim.min(2 * cfg.kv_dim() - 2 * r * cfg.n_heads);
        let model = jlrd_model(&cfg, &w, &sets, d_ckv);
        let a = forward_ropelite(&cfg, &w, &sets, &toks).unwrap();
        let b = forward_compressed(&model, &toks).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(max_abs_diff(&x.hidden, &y.hidden) <= 1e-8, "r={r}");
        }
    }
}

/// Low-rank decode must equal a partial-RoPE model whose W^k, W^v are
/// replaced by the reassembled products.
#[test]
fn compressed_step_matches_reconstructed_weights() {
    let cfg = ModelConfig::new(2, 2, 8, 16).unwrap();
    let w = random_weights(&cfg, 15);
    let sets = random_sets(&cfg, 2, 300);
    let toks = random_tokens(16, 9, 16);
    for slrd in [false, true] {
        let factors: Vec<_> = w
            .layers
            .iter()
            .zip(&sets)
            .map(|(lw, s)| {
                let split = split_key_columns(&lw.wk, s, cfg.head_dim).unwrap();
                if slrd {
                    decompose_slrd(&split, &lw.wv, 3, 5).unwrap()
                } else {
                    decompose_jlrd(&split, &lw.wv, 6).unwrap()
                }
            })
            .collect();
        let hat_layers = w
            .layers
            .iter()
            .zip(&factors)
            .map(|(lw, f)| {
                let elite = lw.wk.select_columns(&f.layout.elite_cols).unwrap();
                let (wk, wv) = f.reassemble(&elite).unwrap();
                LayerWeights {
                    wq: lw.wq.clone(),
                    wk,
                    wv,
                    wo: lw.wo.clone(),
                }
            })
            .collect();
        let w_hat = AttentionWeights::new(&cfg, hat_layers).unwrap();
        let model = CompressedModel::build(&cfg, &w, factors).unwrap();

        let mut cache = KVCacheStore::compressed(&model);
        let first = decode_step_compressed(&model, &mut cache, &toks[0], false).unwrap();
        let oracle = forward_ropelite(&cfg, &w_hat, &sets, &toks).unwrap();
        assert!(max_abs_diff(&first.hidden, &oracle[0].hidden) <= 1e-9);
        for (t, x) in toks.iter().enumerate().skip(1) {
            let out = decode_step_compressed(&model, &mut cache, x, false).unwrap();
            assert!(
                max_abs_diff(&out.hidden, &oracle[t].hidden) <= 1e-9,
                "slrd={slrd} t={t}"
            );
        }
    }
}

#[test]
fn compressed_cache_width_and_content() {
    let cfg = ModelConfig::new(2, 2, 8, 16).unwrap();
    let w = random_weights(&cfg, 17);
    let sets = random_sets(&cfg, 1, 400);
    let model = jlrd_model(&cfg, &w, &sets, 6);
    let toks = random_tokens(16, 5, 18);
    let mut cache = KVCacheStore::compressed(&model);
    for x in &toks {
        decode_step_compressed(&model, &mut cache, x, false).unwrap();
    }
    assert_eq!(cache.layout(), CacheLayout::Compressed);
    assert_eq!(cache.width(), 2 * 1 * 2 + 6);
    assert_eq!(cache.stored_len(), 2 * 5 * (2 * 1 * 2 + 6));
    assert_eq!(cache.ratio(), Ratio::new(10, 32));
    assert_eq!(cache_bytes(&cache, 5), 2 * 5 * 10 * 8);

    // entry of token 3, layer 0: elite chunk rotated once at insertion, latent = x·A
    let lw = &w.layers[0];
    let f = &model.layers[0].factors;
    let k = vecmat(&toks[3], &lw.wk).unwrap();
    let entry = cache.entry(0, 3);
    for h in 0..2 {
        let kh = rotate(&k[h * 8..(h + 1) * 8], 3, &sets[0][h], &cfg.rope).unwrap();
        let i = sets[0][h].indices()[0];
        assert!((entry[2 * h] - kh[2 * i]).abs() < 1e-12);
        assert!((entry[2 * h + 1] - kh[2 * i + 1]).abs() < 1e-12);
    }
    let latent = vecmat(&toks[3], f.a_k()).unwrap();
    assert!(max_abs_diff(&entry[4..], &latent) < 1e-12);

    // earlier entries are untouched by later steps
    let before = cache.entry(1, 0).to_vec();
    decode_step_compressed(&model, &mut cache, &toks[0], false).unwrap();
    assert_eq!(cache.entry(1, 0), &before[..]);
}

#[test]
fn wrong_cache_layout_is_rejected() {
    let cfg = ModelConfig::new(1, 2, 4, 8).unwrap();
    let w = random_weights(&cfg, 19);
    let sets = vec![vec![ChunkSet::full(2); 2]];
    let model = jlrd_model(&cfg, &w, &sets, 4);
    let mut full = KVCacheStore::full(&cfg);
    assert!(decode_step_compressed(&model, &mut full, &[0.0; 8], false).is_err());
    let mut comp = KVCacheStore::compressed(&model);
    assert!(decode_step(&cfg, &w, &mut comp, &[0.0; 8], false).is_err());
}

#[test]
fn cache_width_per_layout() {
    let cfg = ModelConfig::new(2, 2, 8, 16).unwrap();
    let w = random_weights(&cfg, 21);
    let sets = random_sets(&cfg, 2, 500);
    assert_eq!(KVCacheStore::full(&cfg).width(), 32);
    assert_eq!(KVCacheStore::ropelite(&cfg, &sets).unwrap().width(), 32);
    let model = jlrd_model(&cfg, &w, &sets, 7);
    assert_eq!(KVCacheStore::compressed(&model).width(), 2 * 2 * 2 + 7);
}
