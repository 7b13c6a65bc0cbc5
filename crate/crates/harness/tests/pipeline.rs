use std::path::Path;

use elitekv_core::ModelConfig;
use elitekv_harness::error::exit;
use elitekv_harness::format::write_model;
use elitekv_harness::pipeline::{run_pipeline, RunManifest};
use elitekv_harness::report::{read_jsonl, Record};
use elitekv_harness::synth::gen_model;

fn toy_model(dir: &Path) {
    let cfg = ModelConfig::new(2, 2, 8, 16).unwrap();
    write_model(&dir.join("m.ekv"), &cfg, &gen_model(42, &cfg)).unwrap();
}

fn manifest(dir: &Path, name: &str, body: &str) -> RunManifest {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    RunManifest::load(&path).unwrap()
}

fn deltas(recs: &[Record]) -> Vec<(String, f64)> {
    recs.iter()
        .filter_map(|r| match r {
            Record::Equivalence {
                pair,
                max_abs_delta,
                ..
            } => Some((pair.clone(), *max_abs_delta)),
            _ => None,
        })
        .collect()
}

#[test]
fn full_rank_run_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    toy_model(dir.path());
    let m = manifest(
        dir.path(),
        "run.json",
        r#"{"seed": 42, "model": "m.ekv", "out_dir": "out", "r": 4, "ranks": {"d_ckv": 16}, "decode_tokens": 16}"#,
    );
    let out = run_pipeline(&m).unwrap();
    assert!(out.passed());
    let d = deltas(&out.equivalence);
    assert_eq!(d.len(), 3);
    assert!(d.iter().all(|(_, x)| *x <= 1e-8), "{d:?}");
    assert_eq!(
        read_jsonl(&out.artifacts.equivalence).unwrap(),
        out.equivalence
    );
}

#[test]
fn quarter_target_hits_exact_ratio() {
    let dir = tempfile::tempdir().unwrap();
    toy_model(dir.path());
    let m = manifest(
        dir.path(),
        "run.json",
        r#"{"seed": 42, "model": "m.ekv", "out_dir": "out", "target_ratio": 0.25,
            "cfg": {"n_layers": 2, "n_heads": 2, "head_dim": 8, "embed_dim": 16}}"#,
    );
    let out = run_pipeline(&m).unwrap();
    let cost = out
        .cost
        .iter()
        .find_map(|r| match r {
            Record::Cost { cache_ratio, .. } => Some(cache_ratio.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(cost, "1/4");
    assert!(out
        .cost
        .iter()
        .any(|r| matches!(r, Record::Allocation { .. })));
}

#[test]
fn separate_budget_run() {
    let dir = tempfile::tempdir().unwrap();
    toy_model(dir.path());
    let m = manifest(
        dir.path(),
        "run.json",
        r#"{"seed": 1, "model": "m.ekv", "out_dir": "out", "mode": "slrd", "r": 1, "target_ratio": 0.5, "residual_norm": true}"#,
    );
    let out = run_pipeline(&m).unwrap();
    assert!(out.passed());
    let widths: Vec<usize> = out
        .equivalence
        .iter()
        .filter_map(|r| match r {
            Record::Cache { layout, width, .. } if layout == "compressed" => Some(*width),
            _ => None,
        })
        .collect();
    assert_eq!(widths, [16]);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    toy_model(dir.path());
    let body = |out: &str| {
        format!(
            r#"{{"seed": 5, "model": "m.ekv", "out_dir": "{out}", "target_ratio": 0.5, "proxy": "perplexity"}}"#
        )
    };
    let a = run_pipeline(&manifest(dir.path(), "a.json", &body("a"))).unwrap();
    let b = run_pipeline(&manifest(dir.path(), "b.json", &body("b"))).unwrap();
    for (x, y) in a.artifacts.all().iter().zip(b.artifacts.all()) {
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(y).unwrap(),
            "{x:?}"
        );
    }
}

#[test]
fn errors_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    toy_model(dir.path());
    let cases = [
        (
            r#"{"seed": 0, "model": "absent.ekv", "out_dir": "o"}"#,
            "load",
            exit::IO,
        ),
        (
            r#"{"seed": 0, "model": "m.ekv", "out_dir": "o", "method": "bogus", "r": 1}"#,
            "load",
            exit::VALIDATION,
        ),
        (
            r#"{"seed": 0, "model": "m.ekv", "out_dir": "o",
                "cfg": {"n_layers": 3, "n_heads": 2, "head_dim": 8, "embed_dim": 16}, "r": 1, "ranks": {"d_ckv": 4}}"#,
            "load",
            exit::VALIDATION,
        ),
        (
            r#"{"seed": 0, "model": "m.ekv", "out_dir": "o", "target_ratio": 1.5}"#,
            "allocate",
            exit::VALIDATION,
        ),
    ];
    for (i, (body, stage, code)) in cases.iter().enumerate() {
        let m = manifest(dir.path(), &format!("{i}.json"), body);
        let err = run_pipeline(&m).unwrap_err();
        assert!(err.to_string().contains(stage), "{i}: {err}");
        assert_eq!(err.exit_code(), *code, "{i}: {err}");
    }
}

#[test]
fn unknown_manifest_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"seed": 0, "model": "m.ekv", "out_dir": "o", "rank": 3}"#,
    )
    .unwrap();
    assert_eq!(
        RunManifest::load(&path).unwrap_err().exit_code(),
        exit::VALIDATION
    );
}
