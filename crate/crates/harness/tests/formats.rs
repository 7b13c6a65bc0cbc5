use std::path::Path;

use elitekv_core::{
    decompose_jlrd, decompose_slrd, split_key_projection, uniform_select, ChunkSet, EliteSelection,
    ModelConfig, SelectionMethod,
};
use elitekv_harness::format::{
    decode_calib, decode_factors, decode_model, encode_calib, encode_factors, encode_model,
    DIGEST_LEN,
};
use elitekv_harness::report::{parse_jsonl, to_jsonl, Record};
use elitekv_harness::synth::{gen_calib, gen_model, CalibSpec};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = ModelConfig> {
    (1usize..=3, 1usize..=3, 1usize..=4)
        .prop_map(|(l, h, c)| ModelConfig::new(l, h, 2 * c, 2 * c * h).unwrap())
}

fn factor_bytes(cfg: &ModelConfig, seed: u64, r: usize, joint: bool) -> Vec<u8> {
    let w = gen_model(seed, cfg);
    let sel = if r == 0 {
        EliteSelection::uniform_sets(cfg, SelectionMethod::Uniform, ChunkSet::empty())
    } else {
        uniform_select(cfg, r).unwrap()
    };
    let layers: Vec<_> = (0..cfg.n_layers)
        .map(|l| {
            let split = split_key_projection(&w.layers[l].wk, &sel, l).unwrap();
            let wv = &w.layers[l].wv;
            if joint {
                decompose_jlrd(&split, wv, cfg.embed_dim.min(3)).unwrap()
            } else {
                decompose_slrd(&split, wv, split.rest.cols().min(1), 2.min(cfg.embed_dim)).unwrap()
            }
        })
        .collect();
    encode_factors(cfg, &layers).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_round_trips_bit_exactly(cfg in shape(), seed in any::<u64>()) {
        let w = gen_model(seed, &cfg);
        let bytes = encode_model(&cfg, &w).unwrap();
        let (cfg2, w2) = decode_model(&bytes, Path::new("m")).unwrap();
        prop_assert_eq!(cfg2, cfg);
        prop_assert_eq!(encode_model(&cfg2, &w2).unwrap(), bytes);
    }

    #[test]
    fn factors_round_trip(cfg in shape(), seed in any::<u64>(), joint in any::<bool>(), r_frac in 0.0f64..1.0) {
        let r = (r_frac * cfg.n_chunks() as f64) as usize;
        let bytes = factor_bytes(&cfg, seed, r, joint);
        let f = decode_factors(&bytes, Path::new("f")).unwrap();
        prop_assert!(f.header.matches(&cfg));
        prop_assert_eq!(f.header.r, r);
        prop_assert_eq!(encode_factors(&cfg, &f.layers).unwrap(), bytes);
    }

    #[test]
    fn any_flipped_factor_byte_is_rejected(seed in any::<u64>(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let cfg = ModelConfig::new(2, 2, 4, 8).unwrap();
        let mut bytes = factor_bytes(&cfg, seed, 1, seed % 2 == 0);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_factors(&bytes, Path::new("f")).is_err());
    }

    #[test]
    fn truncated_files_are_rejected(seed in any::<u64>(), cut in any::<prop::sample::Index>()) {
        let cfg = ModelConfig::new(1, 2, 4, 8).unwrap();
        let model = encode_model(&cfg, &gen_model(seed, &cfg)).unwrap();
        prop_assert!(decode_model(&model[..cut.index(model.len())], Path::new("m")).is_err());
        let factors = factor_bytes(&cfg, seed, 1, true);
        prop_assert!(decode_factors(&factors[..cut.index(factors.len())], Path::new("f")).is_err());
    }

    #[test]
    fn calib_round_trips(seed in any::<u64>(), vocab in 1usize..20, n_seqs in 1usize..4, seq_len in 1usize..10) {
        let c = gen_calib(seed, 6, CalibSpec { vocab, n_seqs, seq_len });
        let bytes = encode_calib(&c).unwrap();
        let back = decode_calib(&bytes, Path::new("c")).unwrap();
        prop_assert_eq!(encode_calib(&back).unwrap(), bytes);
        prop_assert_eq!(back.ids, c.ids);
    }

    #[test]
    fn records_parse_back_losslessly(
        residual in any::<f64>(),
        delta in prop::num::f64::NORMAL | prop::num::f64::ZERO,
        tokens in 0usize..1000,
    ) {
        let recs = vec![
            Record::verify("s", "p", residual.abs(), 1e-8),
            Record::Equivalence { pair: "a-vs-b".into(), tokens, max_abs_delta: delta },
        ];
        let text = to_jsonl(&recs);
        let back = parse_jsonl(&text).unwrap();
        prop_assert_eq!(to_jsonl(&back), text);
        if residual.is_finite() {
            prop_assert_eq!(back, recs);
        }
    }
}

#[test]
fn factor_file_ends_with_digest_of_body() {
    use sha2::{Digest, Sha256};
    let cfg = ModelConfig::new(2, 2, 4, 8).unwrap();
    let bytes = factor_bytes(&cfg, 5, 1, true);
    let (body, tail) = bytes.split_at(bytes.len() - DIGEST_LEN);
    assert_eq!(&bytes[..4], b"EKF1");
    assert_eq!(Sha256::digest(body).as_slice(), tail);
}

#[test]
fn factor_header_for_wrong_model_is_detected() {
    let cfg = ModelConfig::new(2, 2, 4, 8).unwrap();
    let f = decode_factors(&factor_bytes(&cfg, 1, 1, false), Path::new("f")).unwrap();
    assert!(!f.header.matches(&ModelConfig::new(3, 2, 4, 8).unwrap()));
}
