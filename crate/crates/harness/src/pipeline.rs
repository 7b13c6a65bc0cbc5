//! select → split → decompose → simulate → verify, driven by a manifest.

use std::path::{Path, PathBuf};

use elitekv_core::chunk_select::{expected_forward_passes, select, selection_distances};
use elitekv_core::lowrank::{allocate_slrd_split, AllocationRequest, KeySplit};
use elitekv_core::{
    cache_bytes, cost_jlrd, cost_slrd, decompose_jlrd, decompose_slrd, forward_compressed,
    forward_full, forward_ropelite, split_key_projection, AttentionWeights, ChunkSet,
    CompressedModel, CostReport, EliteSelection, FactorMode, KVCacheStore, LowRankFactors,
    ModelConfig, ScoreMode, SelectionMethod,
};
use serde::{Deserialize, Serialize};

use crate::alloc::{allocate, select_r, ProxyInputs, ProxyKind};
use crate::elite::write_elite;
use crate::error::{HarnessError, Result, StageExt};
use crate::format::{read_bytes, read_calib, read_factors, read_model, write_factors, CalibData};
use crate::report::{write_jsonl, Record};
use crate::synth::{gen_calib, gen_tokens, CalibSpec};
use crate::verify::{factor_residual, max_abs_delta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeDoc {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    #[serde(default = "default_base")]
    pub rope_base: f64,
}

fn default_base() -> f64 {
    elitekv_core::rope::DEFAULT_BASE
}

/// Latent ranks; which fields apply depends on the mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ranks {
    pub d_ckv: Option<usize>,
    pub d_ck: Option<usize>,
    pub d_cv: Option<usize>,
}

fn default_method() -> String {
    "ropelite".into()
}
fn default_score() -> String {
    "pre".into()
}
fn default_mode() -> String {
    "jlrd".into()
}
fn default_proxy() -> String {
    "frobenius".into()
}
fn default_alignment() -> usize {
    1
}
fn default_tokens() -> usize {
    32
}

/// One reproducible run. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    pub model: PathBuf,
    /// Synthesized from `seed` when absent.
    #[serde(default)]
    pub calib: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// When present, must match the model header.
    #[serde(default)]
    pub cfg: Option<ShapeDoc>,
    #[serde(default)]
    pub residual_norm: bool,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_score")]
    pub score: String,
    #[serde(default)]
    pub r: Option<usize>,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub ranks: Option<Ranks>,
    #[serde(default)]
    pub target_ratio: Option<f64>,
    #[serde(default = "default_alignment")]
    pub alignment: usize,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default = "default_proxy")]
    pub proxy: String,
    #[serde(default = "default_tokens")]
    pub decode_tokens: usize,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let mut m: RunManifest = serde_json::from_slice(&bytes)
            .map_err(|e| HarnessError::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut m.model);
        resolve(&mut m.out_dir);
        if let Some(c) = m.calib.as_mut() {
            resolve(c);
        }
        Ok(m)
    }
}

/// Paths of everything a run writes, in write order.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifacts {
    pub elite: PathBuf,
    pub factors: PathBuf,
    pub search: PathBuf,
    pub cost: PathBuf,
    pub equivalence: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            elite: dir.join("elite.json"),
            factors: dir.join("factors.ekf"),
            search: dir.join("search.jsonl"),
            cost: dir.join("cost.jsonl"),
            equivalence: dir.join("equivalence.jsonl"),
        }
    }

    pub fn all(&self) -> [&Path; 5] {
        [
            &self.elite,
            &self.factors,
            &self.search,
            &self.cost,
            &self.equivalence,
        ]
    }
}

/// Outcome of a run: artifact paths plus the records written.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub artifacts: Artifacts,
    pub search: Vec<Record>,
    pub cost: Vec<Record>,
    pub equivalence: Vec<Record>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.equivalence.iter().all(Record::passed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Plan {
    Joint {
        r: usize,
        d_ckv: usize,
    },
    Separate {
        r: usize,
        d_ck: usize,
        d_cv: usize,
    },
    /// Per-layer greedy split of a fixed cache budget.
    SeparateBudget {
        r: usize,
        budget: usize,
    },
}

impl Plan {
    fn r(self) -> usize {
        match self {
            Plan::Joint { r, .. } | Plan::Separate { r, .. } | Plan::SeparateBudget { r, .. } => r,
        }
    }
}

pub fn run_pipeline(m: &RunManifest) -> Result<RunOutput> {
    // ---- load
    let (cfg, w, calib) = load_inputs(m).stage("load")?;
    let method: SelectionMethod = m.method.parse().stage("load")?;
    let score: ScoreMode = m.score.parse().stage("load")?;
    let mode: FactorMode = m.mode.parse().stage("load")?;
    let art = Artifacts::in_dir(&m.out_dir);

    let mut cost_records = Vec::new();
    let plan =
        plan(m, &cfg, &w, &calib, method, score, mode, &mut cost_records).stage("allocate")?;
    let r = plan.r();

    // ---- select
    let (sel, search) = run_select(&cfg, &w, &calib, method, score, r).stage("select")?;
    write_elite(&art.elite, &sel).stage("select")?;
    write_jsonl(&art.search, &search).stage("select")?;

    // ---- split
    let splits = (0..cfg.n_layers)
        .map(|l| split_key_projection(&w.layers[l].wk, &sel, l))
        .collect::<elitekv_core::Result<Vec<_>>>()
        .stage("split")?;

    // ---- decompose
    let (factors, cost) = decompose(&cfg, &w, &splits, plan).stage("decompose")?;
    write_factors(&art.factors, &cfg, &factors).stage("decompose")?;
    let (k0, v0) = (factors[0].key_rank(), factors[0].value_rank());
    cost_records.push(Record::cost(&cfg, mode, r, k0, v0, &cost));
    for (l, (split, f)) in splits.iter().zip(&factors).enumerate() {
        let (residual, oracle, _) =
            factor_residual(split, &w.layers[l].wv, f).stage("decompose")?;
        cost_records.push(Record::Factor {
            layer: l,
            key_rank: f.key_rank(),
            value_rank: f.value_rank(),
            residual,
            oracle,
        });
    }
    write_jsonl(&art.cost, &cost_records).stage("decompose")?;

    // ---- simulate
    let sim =
        simulate(&cfg, &w, &sel.layers, &factors, m.seed, m.decode_tokens).stage("simulate")?;

    // ---- verify
    let mut equivalence = sim.records;
    equivalence.extend(
        verify_run(
            &cfg,
            &w,
            &art,
            &sel,
            &factors,
            &splits,
            &cost,
            &sim.deltas,
            plan,
        )
        .stage("verify")?,
    );
    write_jsonl(&art.equivalence, &equivalence).stage("verify")?;

    let out = RunOutput {
        artifacts: art,
        search,
        cost: cost_records,
        equivalence,
    };
    if !out.passed() {
        let failed = out.equivalence.iter().filter(|r| !r.passed()).count();
        let total = out
            .equivalence
            .iter()
            .filter(|r| matches!(r, Record::Verify { .. }))
            .count();
        return Err(HarnessError::VerifyFailed { failed, total }).stage("verify");
    }
    Ok(out)
}

fn load_inputs(m: &RunManifest) -> Result<(ModelConfig, AttentionWeights, CalibData)> {
    let (cfg, w) = read_model(&m.model)?;
    let cfg = cfg.with_residual_norm(m.residual_norm);
    if let Some(s) = &m.cfg {
        let same = s.n_layers == cfg.n_layers
            && s.n_heads == cfg.n_heads
            && s.head_dim == cfg.head_dim
            && s.embed_dim == cfg.embed_dim
            && s.rope_base == cfg.rope.base();
        if !same {
            return Err(HarnessError::Invalid(format!(
                "manifest cfg {s:?} does not match the model header"
            )));
        }
    }
    let calib = match &m.calib {
        Some(p) => read_calib(p)?,
        None => gen_calib(m.seed, cfg.embed_dim, CalibSpec::default()),
    };
    if calib.embed_dim() != cfg.embed_dim {
        return Err(HarnessError::Invalid(format!(
            "calibration embedding dim {} differs from model d={}",
            calib.embed_dim(),
            cfg.embed_dim
        )));
    }
    Ok((cfg, w, calib))
}

#[allow(clippy::too_many_arguments)]
fn plan(
    m: &RunManifest,
    cfg: &ModelConfig,
    w: &AttentionWeights,
    calib: &CalibData,
    method: SelectionMethod,
    score: ScoreMode,
    mode: FactorMode,
    records: &mut Vec<Record>,
) -> Result<Plan> {
    let ranks = m.ranks.unwrap_or_default();
    match mode {
        FactorMode::Jlrd => {
            if let (Some(r), Some(d_ckv)) = (m.r, ranks.d_ckv) {
                return Ok(Plan::Joint { r, d_ckv });
            }
            let target = m.target_ratio.ok_or_else(|| {
                HarnessError::Invalid("jlrd needs r and ranks.d_ckv, or target_ratio".into())
            })?;
            let req = AllocationRequest {
                target_ratio: target,
                alignment: m.alignment,
                tolerance: m.tolerance,
            };
            let proxy: ProxyKind = m.proxy.parse()?;
            let inputs = ProxyInputs {
                weights: w,
                calib,
                method,
                score,
                seed: m.seed,
            };
            let ranked: Vec<_> = allocate(cfg, req, proxy, Some(&inputs), m.r)?
                .into_iter()
                .filter(|c| c.d_ckv > 0)
                .collect();
            let best = ranked.first().ok_or_else(|| {
                HarnessError::Invalid("only latent-free configurations reach the target".into())
            })?;
            for (rank, c) in ranked.iter().take(5).enumerate() {
                records.push(Record::Allocation {
                    rank,
                    r: c.r,
                    d_ckv: c.d_ckv,
                    proxy: c.proxy,
                    params_original: c.cost.params_original,
                    params_after: c.cost.params_after,
                    cache_per_token_layer: c.cost.cache_per_token_layer,
                    cache_ratio: c.cost.cache_ratio.to_string(),
                });
            }
            Ok(Plan::Joint {
                r: best.r,
                d_ckv: best.d_ckv,
            })
        }
        FactorMode::Slrd => {
            let r =
                m.r.ok_or_else(|| HarnessError::Invalid("slrd needs r".into()))?;
            if let (Some(d_ck), Some(d_cv)) = (ranks.d_ck, ranks.d_cv) {
                return Ok(Plan::Separate { r, d_ck, d_cv });
            }
            let target = m.target_ratio.ok_or_else(|| {
                HarnessError::Invalid(
                    "slrd needs ranks.d_ck and ranks.d_cv, or target_ratio".into(),
                )
            })?;
            let budget = (target * cfg.full_cache_width() as f64).round() as usize;
            Ok(Plan::SeparateBudget { r, budget })
        }
    }
}

fn run_select(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    calib: &CalibData,
    method: SelectionMethod,
    score: ScoreMode,
    r: usize,
) -> Result<(EliteSelection, Vec<Record>)> {
    let (sel, stats) = if r == 0 {
        (select_r(cfg, w, calib, method, 0, score)?, None)
    } else {
        select(method, cfg, w, &calib.batch()?, r, score)?
    };
    let dist = selection_distances(cfg, w, &calib.batch()?, &sel, score)?;
    let rec = Record::Search {
        method: method.to_string(),
        r,
        score: score.to_string(),
        forward_passes: stats.map(|s| s.forward_passes),
        expected_forward_passes: expected_forward_passes(cfg.n_chunks(), r),
        total_distance: dist.iter().flatten().sum(),
    };
    Ok((sel, vec![rec]))
}

fn decompose(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    splits: &[KeySplit],
    plan: Plan,
) -> Result<(Vec<LowRankFactors>, CostReport)> {
    let factors = splits
        .iter()
        .zip(&w.layers)
        .map(|(split, lw)| match plan {
            Plan::Joint { d_ckv, .. } => decompose_jlrd(split, &lw.wv, d_ckv),
            Plan::Separate { d_ck, d_cv, .. } => decompose_slrd(split, &lw.wv, d_ck, d_cv),
            Plan::SeparateBudget { r, budget } => {
                let (d_ck, d_cv) = allocate_slrd_split(&split.rest, &lw.wv, budget, r, cfg)?;
                decompose_slrd(split, &lw.wv, d_ck, d_cv)
            }
        })
        .collect::<elitekv_core::Result<Vec<_>>>()?;
    let f = &factors[0];
    let cost = match plan {
        Plan::Joint { r, d_ckv } => cost_jlrd(cfg, r, d_ckv),
        _ => cost_slrd(cfg, plan.r(), f.key_rank(), f.value_rank()),
    };
    Ok((factors, cost))
}

/// Max-abs deltas between the three decode paths.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Deltas {
    pub full_vs_ropelite: f64,
    pub ropelite_vs_compressed: f64,
    pub full_vs_compressed: f64,
}

pub struct Simulation {
    pub records: Vec<Record>,
    pub deltas: Deltas,
}

/// Decodes seeded tokens through the full, partial-RoPE and compressed paths.
pub fn simulate(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    elite: &[Vec<ChunkSet>],
    factors: &[LowRankFactors],
    seed: u64,
    n_tokens: usize,
) -> Result<Simulation> {
    let tokens = gen_tokens(seed, cfg.embed_dim, n_tokens);
    let model = CompressedModel::build(cfg, w, factors.to_vec())?;
    let full = forward_full(cfg, w, &tokens)?;
    let rope = forward_ropelite(cfg, w, elite, &tokens)?;
    let comp = forward_compressed(&model, &tokens)?;

    let mut records: Vec<Record> = [
        KVCacheStore::full(cfg),
        KVCacheStore::ropelite(cfg, elite)?,
        KVCacheStore::compressed(&model),
    ]
    .iter()
    .map(|c| Record::Cache {
        layout: c.layout().name().to_string(),
        width: c.width(),
        ratio: c.ratio().to_string(),
        tokens: n_tokens,
        bytes: cache_bytes(c, n_tokens as u64),
    })
    .collect();
    let deltas = Deltas {
        full_vs_ropelite: max_abs_delta(&full, &rope),
        ropelite_vs_compressed: max_abs_delta(&rope, &comp),
        full_vs_compressed: max_abs_delta(&full, &comp),
    };
    for (pair, d) in [
        ("full-vs-ropelite", deltas.full_vs_ropelite),
        ("ropelite-vs-compressed", deltas.ropelite_vs_compressed),
        ("full-vs-compressed", deltas.full_vs_compressed),
    ] {
        records.push(Record::Equivalence {
            pair: pair.into(),
            tokens: n_tokens,
            max_abs_delta: d,
        });
    }
    Ok(Simulation { records, deltas })
}

#[allow(clippy::too_many_arguments)]
fn verify_run(
    cfg: &ModelConfig,
    w: &AttentionWeights,
    art: &Artifacts,
    sel: &EliteSelection,
    factors: &[LowRankFactors],
    splits: &[KeySplit],
    cost: &CostReport,
    deltas: &Deltas,
    plan: Plan,
) -> Result<Vec<Record>> {
    const SUITE: &str = "pipeline";
    let mut out = Vec::new();

    let model = CompressedModel::build(cfg, w, factors.to_vec())?;
    let width = model.cache_width() as u64;
    out.push(Record::verify(
        SUITE,
        "cache-width-matches-cost",
        width.abs_diff(cost.cache_per_token_layer) as f64,
        0.0,
    ));
    let ratio_ok = KVCacheStore::compressed(&model).ratio() == cost.cache_ratio;
    out.push(Record::verify(
        SUITE,
        "cache-ratio-exact",
        f64::from(u8::from(!ratio_ok)),
        0.0,
    ));

    let mut worst = 0.0f64;
    for (l, (split, f)) in splits.iter().zip(factors).enumerate() {
        let (res, oracle, norm) = factor_residual(split, &w.layers[l].wv, f)?;
        worst = worst.max((res - oracle).abs() / norm.max(1e-300));
    }
    out.push(Record::verify(
        SUITE,
        "factor-error-equals-tail-sigma",
        worst,
        1e-8,
    ));

    let reread = read_factors(&art.factors)?;
    out.push(Record::verify(
        SUITE,
        "factor-file-round-trip",
        f64::from(u8::from(reread.layers != factors)),
        0.0,
    ));

    if sel.r == cfg.n_chunks() {
        out.push(Record::verify(
            SUITE,
            "all-chunks-ropelite-equals-full",
            deltas.full_vs_ropelite,
            1e-10,
        ));
    }
    let full_rank = match plan {
        Plan::Joint { r, d_ckv } => {
            d_ckv == cfg.embed_dim.min(2 * cfg.kv_dim() - 2 * r * cfg.n_heads)
        }
        _ => factors.iter().zip(splits).all(|(f, s)| {
            f.key_rank() == s.rest.rows().min(s.rest.cols())
                && f.value_rank() == cfg.embed_dim.min(cfg.kv_dim())
        }),
    };
    if full_rank {
        out.push(Record::verify(
            SUITE,
            "full-rank-compressed-equals-ropelite",
            deltas.ropelite_vs_compressed,
            1e-8,
        ));
    }
    Ok(out)
}
